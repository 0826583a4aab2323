use std::io::{BufRead, Write};
use std::path::Path;

use poigraph::config::RunConfig;
use poigraph::datamodel::{
    ingest_catalog, read_logs_lenient, synth_generate, write_catalog, write_logs, SynthConfig,
};
use poigraph::evalkit::{
    evaluate, is_cross_script, lexical_prefilter, run_ablations, AblationSetup, DualEncoder,
    DualEncoderConfig, DualEncoderScorer, EvalQuery, EvalReport, LexicalScorer, ModelScorer,
};
use poigraph::graphbuild::{build_graph, HeteroGraph};
use poigraph::numerics::{grad_check_sampled, DType, Scalar};
use poigraph::pipeline::{load_splits, split_records, train_vocab, Splits};
use poigraph::ranker::{self, batch_loss, Example, FeatureRecord, Model, ModelConfig, Variant};
use poigraph::util::write_atomic;
use poigraph::Error;
use serde_json::json;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::settings::{ensure_dir, read_manifest, write_manifest};

pub fn run(cli: Cli) -> CliResult<()> {
    if let Command::Synth(a) = &cli.command {
        return synth(a);
    }
    let cfg = crate::settings::resolve(&cli.global)?;
    match cfg.precision {
        DType::F32 => dispatch::<f32>(&cfg, &cli.command),
        DType::F64 => dispatch::<f64>(&cfg, &cli.command),
    }
}

fn dispatch<T: Scalar>(cfg: &RunConfig, cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Synth(_) => unreachable!("handled before config resolution"),
        Command::Ingest => ingest(cfg),
        Command::BuildGraph => build(cfg),
        Command::Train => train::<T>(cfg),
        Command::Eval(a) => eval::<T>(cfg, a),
        Command::Rank(a) => rank::<T>(cfg, a),
        Command::Repl(a) => repl::<T>(cfg, a),
        Command::ExportFeatures(a) => export::<T>(cfg, a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
        Command::Ablate(a) => ablate::<T>(cfg, a),
    }
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut sc: SynthConfig = match &a.json {
        Some(j) => serde_json::from_str(j).map_err(|e| CliError::Usage(format!("--json: {e}")))?,
        None => SynthConfig::default(),
    };
    sc.num_pois = a.pois.unwrap_or(sc.num_pois);
    sc.num_queries = a.queries.unwrap_or(sc.num_queries);
    sc.languages = a.languages.unwrap_or(sc.languages);
    sc.seed = a.synth_seed.unwrap_or(sc.seed);
    let out = synth_generate(&sc)?;
    ensure_dir(&a.out)?;
    let catalog = a.out.join("catalog.jsonl");
    let logs = a.out.join("logs.jsonl");
    write_catalog(&catalog, &out.catalog)?;
    write_logs(&logs, &out.records)?;
    let manifest = json!({ "command": "synth", "synth": sc, "pois": out.catalog.len(), "records": out.records.len() });
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    write_atomic(&a.out.join("synth.manifest.json"), text.as_bytes())?;
    println!("pois\t{}\nrecords\t{}", out.catalog.len(), out.records.len());
    Ok(())
}

fn ingest(cfg: &RunConfig) -> CliResult<()> {
    let catalog = ingest_catalog(&cfg.paths.catalog)?;
    let (records, report) = read_logs_lenient(&cfg.paths.logs, Some(&catalog))?;
    let splits = split_records(catalog, &records, &cfg.data, cfg.seed)?;
    let sizes = |ds: &poigraph::datamodel::Dataset| json!({
        "sessions": ds.sessions.len(),
        "records": ds.records().count(),
        "clicked": ds.clicked_records().count(),
    });
    let summary = json!({
        "pois": splits.catalog().len(),
        "validation": report,
        "splits": {
            "train": sizes(&splits.train),
            "valid": sizes(&splits.valid),
            "test": sizes(&splits.test),
        },
    });
    ensure_dir(&cfg.paths.work_dir)?;
    let path = cfg.paths.work_dir.join("ingest.json");
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    write_atomic(&path, text.as_bytes())?;
    write_manifest(&path, "ingest", cfg, &[&cfg.paths.catalog, &cfg.paths.logs], json!({}))?;
    println!("pois\t{}", splits.catalog().len());
    println!("records\t{}", report.records);
    println!("invalid_lines\t{}", report.errors.len());
    for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        println!("{name}_sessions\t{}", ds.sessions.len());
    }
    for e in report.errors.iter().take(10) {
        eprintln!("line {}: {}", e.line, e.message);
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::InvalidLines { count: report.errors.len() })
    }
}

fn build(cfg: &RunConfig) -> CliResult<()> {
    let splits = load_splits(cfg)?;
    let graph = build_graph(&splits.train, &cfg.graph, cfg.seed)?;
    ensure_dir(&cfg.paths.work_dir)?;
    let path = cfg.paths.graph();
    graph.save(&path)?;
    write_manifest(
        &path,
        "build-graph",
        cfg,
        &[&cfg.paths.catalog, &cfg.paths.logs],
        json!({ "digest": graph.digest()? }),
    )?;
    println!("poi_nodes\t{}", graph.num_pois());
    println!("query_nodes\t{}", graph.num_queries());
    println!("poi_poi_edges\t{}", graph.app.len());
    println!("poi_query_edges\t{}", graph.apq.len());
    Ok(())
}

/// Graph artifact, refusing one built under different settings.
fn load_graph(cfg: &RunConfig) -> CliResult<HeteroGraph> {
    let path = cfg.paths.graph();
    let graph = HeteroGraph::load(&path)?;
    let built_with = read_manifest(&path)?["graph_fingerprint"].as_str().unwrap_or_default().to_string();
    if built_with != cfg.graph_fingerprint() {
        return Err(Error::GraphIntegrity(
            "graph was built with different data or graph settings; rerun build-graph".into(),
        )
        .into());
    }
    Ok(graph)
}

fn train<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let splits = load_splits(cfg)?;
    let graph = load_graph(cfg)?;
    let vocab = train_vocab(&splits, cfg)?;
    let examples = Example::from_records(splits.train.clicked_records(), splits.catalog())?;
    let mut model = Model::<T>::new(cfg.model.clone(), splits.catalog().clone(), &graph, vocab, cfg.seed)?;
    let report = ranker::train(&mut model, &examples, &cfg.train, cfg.seed, |e, loss| {
        eprintln!("epoch {}\tloss {loss:.4}", e + 1);
    })?;
    let path = cfg.paths.checkpoint();
    model.save(
        &path,
        json!({ "fingerprint": cfg.fingerprint(), "graph_fingerprint": cfg.graph_fingerprint() }),
    )?;
    write_manifest(
        &path,
        "train",
        cfg,
        &[&cfg.paths.catalog, &cfg.paths.logs, &cfg.paths.graph()],
        json!({ "epoch_losses": report.epoch_losses, "steps": report.steps }),
    )?;
    println!("examples\t{}", examples.len());
    println!("steps\t{}", report.steps);
    if let Some(l) = report.epoch_losses.last() {
        println!("final_loss\t{l:.4}");
    }
    Ok(())
}

/// Checkpoint plus the data it belongs to; refuses a checkpoint whose
/// fingerprint conflicts with the graph's.
fn load_model<T: Scalar>(cfg: &RunConfig) -> CliResult<(Model<T>, Splits)> {
    let splits = load_splits(cfg)?;
    let graph = load_graph(cfg)?;
    let (model, extra) = Model::<T>::load(&cfg.paths.checkpoint(), splits.catalog().clone(), &graph)?;
    if extra["graph_fingerprint"].as_str() != Some(cfg.graph_fingerprint().as_str()) {
        return Err(Error::GraphIntegrity("checkpoint fingerprint conflicts with the graph's".into()).into());
    }
    Ok((model, splits))
}

fn split_queries(splits: &Splits, cfg: &RunConfig, split: &str) -> CliResult<Vec<EvalQuery>> {
    let ds = match split {
        "test" => &splits.test,
        "valid" => &splits.valid,
        "train" => &splits.train,
        other => return Err(CliError::Usage(format!("unknown split `{other}`"))),
    };
    let qs = poigraph::evalkit::eval_queries(ds, cfg.data.prefilter_n);
    if qs.is_empty() {
        return Err(Error::EmptyCorpus("no clicked searches in the evaluation split").into());
    }
    Ok(qs)
}

fn eval<T: Scalar>(cfg: &RunConfig, a: &EvalArgs) -> CliResult<()> {
    let (model, splits) = load_model::<T>(cfg)?;
    let queries = split_queries(&splits, cfg, &a.split)?;
    let cross: Vec<EvalQuery> = queries.iter().filter(|q| is_cross_script(q, splits.catalog())).cloned().collect();
    let variant = model.config.variant.name().to_string();
    let mut report = EvalReport::new(queries.len(), cfg.fingerprint());
    let lexical = LexicalScorer { catalog: splits.catalog() };
    let scorer = ModelScorer::new(&model)?;
    report.models.insert(variant.clone(), evaluate(&scorer, &queries)?);
    report.models.insert("lexical".into(), evaluate(&lexical, &queries)?);
    let dual = if a.dual_encoder {
        let vocab = train_vocab(&splits, cfg)?;
        let mut de = DualEncoder::<T>::new(
            DualEncoderConfig { text: cfg.model.text_config(), dropout: cfg.model.dropout },
            vocab,
            splits.catalog().clone(),
            cfg.seed,
        )?;
        let examples = Example::from_records(splits.train.clicked_records(), splits.catalog())?;
        de.train(&examples, &cfg.train, cfg.seed)?;
        report.models.insert("dual-encoder".into(), evaluate(&DualEncoderScorer::new(&de)?, &queries)?);
        Some(de)
    } else {
        None
    };
    if !cross.is_empty() {
        report.models.insert(format!("cross-script/{variant}"), evaluate(&scorer, &cross)?);
        report.models.insert("cross-script/lexical".into(), evaluate(&lexical, &cross)?);
        if let Some(de) = &dual {
            report
                .models
                .insert("cross-script/dual-encoder".into(), evaluate(&DualEncoderScorer::new(de)?, &cross)?);
        }
    }
    let dir = cfg.paths.reports();
    ensure_dir(&dir)?;
    let path = dir.join(format!("eval-{}.json", a.split));
    report.save(&path)?;
    write_manifest(
        &path,
        "eval",
        cfg,
        &[&cfg.paths.catalog, &cfg.paths.logs, &cfg.paths.graph(), &cfg.paths.checkpoint()],
        json!({ "split": a.split, "cross_script_queries": cross.len() }),
    )?;
    println!("queries\t{}\tcross_script\t{}", queries.len(), cross.len());
    print!("{}", report.to_table(&[&variant, "dual-encoder", "lexical"]));
    Ok(())
}

fn candidate_ids(model_catalog: &poigraph::datamodel::Catalog, query: &str, a: &CandidateArgs) -> Vec<String> {
    match (&a.candidates, a.prefilter) {
        (Some(list), _) => list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        (None, Some(n)) => lexical_prefilter(query, model_catalog, n),
        (None, None) => model_catalog.pois().iter().map(|p| p.poi_id.clone()).collect(),
    }
}

fn rank_table<T: Scalar>(
    model: &Model<T>,
    ranked: &[ranker::ScoredCandidate],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "rank\tpoi_id\tscore\tname")?;
    for c in ranked {
        let name = model.catalog.get(&c.poi_id).map_or("", |p| p.name.as_str());
        writeln!(out, "{}\t{}\t{:.6}\t{}", c.rank, c.poi_id, c.score, name)?;
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> CliError {
    Error::Io { path: "<stdout>".into(), source: e }.into()
}

fn rank<T: Scalar>(cfg: &RunConfig, a: &RankArgs) -> CliResult<()> {
    let (model, _) = load_model::<T>(cfg)?;
    let cache = model.scoring_cache()?;
    let ids = candidate_ids(&model.catalog, &a.query, &a.candidates);
    let mut ranked = model.rank_ids(&cache, &a.query, a.lat, a.lon, &ids, a.features)?;
    if let Some(n) = a.top {
        ranked.truncate(n);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if a.json {
        let rows: Vec<_> = ranked
            .iter()
            .map(|c| {
                let mut row = json!({
                    "rank": c.rank,
                    "poi_id": c.poi_id,
                    "name": model.catalog.get(&c.poi_id).map(|p| p.name.clone()),
                    "score": c.score,
                });
                if let Some(f) = &c.feature_vector {
                    row["features"] = json!(f);
                }
                row
            })
            .collect();
        writeln!(out, "{}", serde_json::to_string(&rows).map_err(Error::from)?).map_err(io_err)?;
    } else {
        rank_table(&model, &ranked, &mut out).map_err(io_err)?;
    }
    Ok(())
}

fn repl<T: Scalar>(cfg: &RunConfig, a: &ReplArgs) -> CliResult<()> {
    let (model, _) = load_model::<T>(cfg)?;
    let cache = model.scoring_cache()?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "quit" || line == "exit" {
            break;
        }
        let mut parts = line.splitn(3, char::is_whitespace);
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(lat), Some(lon), Some(q)) => lat.parse::<f64>().ok().zip(lon.parse::<f64>().ok()).map(|ll| (ll, q)),
            _ => None,
        };
        let Some(((lat, lon), q)) = parsed else {
            writeln!(out, "expected: LAT LON QUERY").map_err(io_err)?;
            continue;
        };
        let args = CandidateArgs { candidates: None, prefilter: a.prefilter };
        let ids = candidate_ids(&model.catalog, q, &args);
        match model.rank_ids(&cache, q, lat, lon, &ids, false) {
            Ok(mut ranked) => {
                ranked.truncate(a.top);
                rank_table(&model, &ranked, &mut out).map_err(io_err)?;
            }
            Err(e) => writeln!(out, "error: {e}").map_err(io_err)?,
        }
        out.flush().map_err(io_err)?;
    }
    Ok(())
}

fn export<T: Scalar>(cfg: &RunConfig, a: &ExportArgs) -> CliResult<()> {
    let (model, splits) = load_model::<T>(cfg)?;
    let queries = split_queries(&splits, cfg, &a.split)?;
    let cache = model.scoring_cache()?;
    let mut text = String::new();
    let mut n = 0usize;
    for q in &queries {
        let recs: Vec<FeatureRecord> =
            model.export_features(&cache, &q.query_id, &q.text, q.lat, q.lon, &q.candidates, !a.no_vectors)?;
        for r in recs {
            text.push_str(&r.to_json_line()?);
            text.push('\n');
            n += 1;
        }
    }
    let path = a.out.clone().unwrap_or_else(|| cfg.paths.work_dir.join("features.jsonl"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_atomic(&path, text.as_bytes())?;
    write_manifest(
        &path,
        "export-features",
        cfg,
        &[&cfg.paths.catalog, &cfg.paths.logs, &cfg.paths.graph(), &cfg.paths.checkpoint()],
        json!({ "split": a.split, "rows": n }),
    )?;
    println!("rows\t{n}");
    Ok(())
}

fn gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> CliResult<()> {
    if a.batch < 2 {
        return Err(CliError::Usage("--batch must be at least 2".into()));
    }
    let mut local = cfg.clone();
    local.graph.d_n = a.dim;
    let splits = if a.synthetic || !Path::new(&cfg.paths.catalog).exists() {
        let out = synth_generate(&SynthConfig { num_pois: 30, num_queries: 120, ..Default::default() })?;
        split_records(out.catalog, &out.records, &cfg.data, cfg.seed)?
    } else {
        load_splits(cfg)?
    };
    let graph = build_graph(&splits.train, &local.graph, cfg.seed)?;
    let vocab = train_vocab(&splits, cfg)?;
    let mcfg = ModelConfig {
        d: a.dim,
        d_c: (a.dim / 2).max(1),
        layer_widths: vec![a.dim, a.dim],
        heads: 2,
        dropout: 0.0,
        residual_init: false,
        ..cfg.model.clone()
    };
    let model = Model::<f64>::new(mcfg, splits.catalog().clone(), &graph, vocab, cfg.seed)?;
    let examples = Example::from_records(splits.train.clicked_records(), splits.catalog())?;
    let mut seen = std::collections::HashSet::new();
    let batch: Vec<&Example> = examples.iter().filter(|e| seen.insert(e.poi)).take(a.batch).collect();
    if batch.len() < a.batch {
        return Err(Error::Data("not enough distinct clicked POIs for the batch".into()).into());
    }
    let per_param = if a.per_param == 0 { usize::MAX } else { a.per_param };
    let report = grad_check_sampled(
        |tape, p| {
            let mut probe = model.clone();
            probe.params = p.clone();
            Ok(batch_loss(&probe, tape, &batch, None)?.loss)
        },
        &model.params,
        a.epsilon,
        per_param,
    )?;
    println!("variant\t{}", model.config.variant);
    println!("entries_checked\t{}", report.entries_checked);
    println!("nonsmooth\t{}", report.nonsmooth);
    println!("max_rel_error\t{:e}", report.max_rel_error);
    println!("worst\t{}[{}]", report.worst_param, report.worst_index);
    if report.max_rel_error >= 1e-4 {
        return Err(CliError::GradCheck {
            max: report.max_rel_error,
            param: report.worst_param,
            index: report.worst_index,
        });
    }
    Ok(())
}

fn parse_list<V: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<V>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CliError::Usage(format!("bad {what} `{x}`"))))
        .collect()
}

fn ablate<T: Scalar>(cfg: &RunConfig, a: &AblateArgs) -> CliResult<()> {
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let variants: Vec<Variant> = match &a.variants {
        Some(v) => parse_list(v, "variant")?,
        None => Variant::ALL.to_vec(),
    };
    let splits = load_splits(cfg)?;
    let graph = load_graph(cfg)?;
    let vocab = train_vocab(&splits, cfg)?;
    let test = split_queries(&splits, cfg, "test")?;
    let fingerprint = cfg.fingerprint();
    let setup = AblationSetup {
        train: &splits.train,
        test: &test,
        graph: &graph,
        vocab: &vocab,
        model: &cfg.model,
        train_cfg: &cfg.train,
        fingerprint: &fingerprint,
    };
    let outcome = run_ablations::<T>(&setup, &variants, &seeds, |seed, v, m| {
        eprintln!("seed {seed}\t{v}\tMRR {:.4}", m["MRR"]);
    })?;
    let dir = cfg.paths.reports();
    ensure_dir(&dir)?;
    let path = dir.join("ablation.json");
    outcome.report.save(&path)?;
    let per_seed: Vec<_> = outcome.per_seed.iter().map(|(s, m)| json!({ "seed": s, "metrics": m })).collect();
    write_manifest(
        &path,
        "ablate",
        cfg,
        &[&cfg.paths.catalog, &cfg.paths.logs, &cfg.paths.graph()],
        json!({ "seeds": seeds, "per_seed": per_seed }),
    )?;
    let order: Vec<&str> = variants.iter().map(|v| v.name()).collect();
    print!("{}", outcome.report.to_table(&order));
    Ok(())
}
