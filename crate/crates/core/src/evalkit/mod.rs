//! Offline metrics, baseline scorers, the ablation runner and reports.

mod baselines;
mod metrics;

use std::collections::BTreeMap;

use crate::datamodel::synth::script_of;
use crate::datamodel::{Catalog, Dataset};
use crate::error::{Error, Result};
use crate::graphbuild::HeteroGraph;
use crate::numerics::{Scalar, Tensor};
use crate::ranker::{self, Example, Model, ModelConfig, ScoringCache, TrainConfig, Variant};
use crate::textenc::CharVocab;

pub use baselines::{
    lexical_baseline, lexical_prefilter, lexical_score, DualEncoder, DualEncoderConfig,
};
pub use metrics::{
    mean_metrics, metric_names, metric_suite, metrics_from_ranks, EvalReport, MetricValues,
    RankedList, KS,
};

/// Default candidate count of the lexical prefilter.
pub const DEFAULT_PREFILTER_N: usize = 10;

/// A held-out search with its candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub query_id: String,
    pub text: String,
    pub lat: f64,
    pub lon: f64,
    pub truth: String,
    pub candidates: Vec<String>,
}

/// Clicked searches of a dataset. Candidates are the shown POIs when
/// logged, else the lexical top `prefilter_n`.
pub fn eval_queries(ds: &Dataset, prefilter_n: usize) -> Vec<EvalQuery> {
    let mut out = Vec::new();
    for (si, s) in ds.sessions.iter().enumerate() {
        for (ri, r) in s.records.iter().enumerate() {
            let Some(truth) = &r.clicked_poi_id else { continue };
            let candidates = match &r.shown_poi_ids {
                Some(shown) if !shown.is_empty() => shown.clone(),
                _ => lexical_prefilter(&r.query_text, &ds.catalog, prefilter_n),
            };
            out.push(EvalQuery {
                query_id: format!("{}:{}:{si}.{ri}", r.user_id, r.timestamp),
                text: r.query_text.clone(),
                lat: r.user_lat,
                lon: r.user_lon,
                truth: truth.clone(),
                candidates,
            });
        }
    }
    out
}

/// Most frequent synthetic script among the letters of `s`.
pub fn dominant_script(s: &str) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in s.chars().filter_map(script_of) {
        *counts.entry(c).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k)
}

/// Whether the query is written mainly in a different script than the
/// name of its clicked POI.
pub fn is_cross_script(q: &EvalQuery, catalog: &Catalog) -> bool {
    let Some(p) = catalog.get(&q.truth) else { return false };
    match (dominant_script(&q.text), dominant_script(&p.name)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}

/// Anything that scores a query against candidate POI ids.
pub trait Scorer {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>>;
}

pub struct LexicalScorer<'a> {
    pub catalog: &'a Catalog,
}

impl Scorer for LexicalScorer<'_> {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        let pois = q
            .candidates
            .iter()
            .map(|id| {
                self.catalog.get(id).ok_or_else(|| Error::Lookup {
                    kind: "poi_id",
                    id: id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(lexical_baseline(&q.text, &pois))
    }
}

pub struct ModelScorer<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub cache: ScoringCache<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>) -> Result<Self> {
        Ok(ModelScorer {
            model,
            cache: model.scoring_cache()?,
        })
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        let ranked = self
            .model
            .rank_ids(&self.cache, &q.text, q.lat, q.lon, &q.candidates, false)?;
        let mut by_id: BTreeMap<&str, f64> = BTreeMap::new();
        for c in &ranked {
            by_id.insert(&c.poi_id, c.score);
        }
        Ok(q.candidates.iter().map(|id| by_id[id.as_str()]).collect())
    }
}

pub struct DualEncoderScorer<'a, T: Scalar> {
    pub model: &'a DualEncoder<T>,
    pub cache: Tensor<T>,
}

impl<'a, T: Scalar> DualEncoderScorer<'a, T> {
    pub fn new(model: &'a DualEncoder<T>) -> Result<Self> {
        Ok(DualEncoderScorer {
            model,
            cache: model.poi_cache()?,
        })
    }
}

impl<T: Scalar> Scorer for DualEncoderScorer<'_, T> {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        self.model.score(&self.cache, &q.text, &q.candidates)
    }
}

/// Candidates of `q` by descending score, ties by `poi_id`.
pub fn ranked_list(q: &EvalQuery, scores: &[f64]) -> RankedList {
    let mut order: Vec<usize> = (0..q.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| q.candidates[a].cmp(&q.candidates[b]))
    });
    RankedList {
        items: order.into_iter().map(|i| q.candidates[i].clone()).collect(),
        truth: Some(q.truth.clone()),
    }
}

pub fn evaluate(scorer: &dyn Scorer, queries: &[EvalQuery]) -> Result<MetricValues> {
    let lists = queries
        .iter()
        .map(|q| Ok(ranked_list(q, &scorer.score(q)?)))
        .collect::<Result<Vec<_>>>()?;
    metric_suite(&lists, &KS)
}

/// Per-seed metrics of each variant and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    /// Mean over seeds, keyed by variant name.
    pub report: EvalReport,
    pub per_seed: Vec<(u64, BTreeMap<String, MetricValues>)>,
}

/// Inputs shared by every ablation run.
pub struct AblationSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a [EvalQuery],
    pub graph: &'a HeteroGraph,
    pub vocab: &'a CharVocab,
    pub model: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub fingerprint: &'a str,
}

/// Trains and evaluates each variant under each seed with identical
/// budgets; only the graph view differs.
pub fn run_ablations<T: Scalar>(
    setup: &AblationSetup<'_>,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(u64, Variant, &MetricValues),
) -> Result<AblationOutcome> {
    let examples = Example::from_records(setup.train.clicked_records(), &setup.train.catalog)?;
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut row = BTreeMap::new();
        for &v in variants {
            let cfg = ModelConfig {
                variant: v,
                ..setup.model.clone()
            };
            let mut model = Model::<T>::new(
                cfg,
                setup.train.catalog.clone(),
                setup.graph,
                setup.vocab.clone(),
                seed,
            )?;
            ranker::train(&mut model, &examples, setup.train_cfg, seed, |_, _| {})?;
            let metrics = evaluate(&ModelScorer::new(&model)?, setup.test)?;
            progress(seed, v, &metrics);
            row.insert(v.name().to_string(), metrics);
        }
        per_seed.push((seed, row));
    }
    let mut report = EvalReport::new(setup.test.len(), setup.fingerprint);
    for v in variants {
        let runs: Vec<MetricValues> = per_seed.iter().map(|(_, r)| r[v.name()].clone()).collect();
        report.models.insert(v.name().to_string(), mean_metrics(&runs));
    }
    Ok(AblationOutcome { report, per_seed })
}
