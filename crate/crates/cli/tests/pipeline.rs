use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_poigraph");

const SMALL: &str = r#"seed = 1
[paths]
catalog = "data/catalog.jsonl"
logs = "data/logs.jsonl"
work_dir = "run"
[graph]
d_n = 16
[model]
d = 16
d_c = 8
layer_widths = [16, 16]
heads = 2
[train]
epochs = 2
batch_size = 16
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_config<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    ["--config", "run.toml"].into_iter().chain(rest.iter().copied()).collect()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "data", "--pois", "80", "--queries", "400"]);
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

fn first_query(dir: &Path) -> (String, String) {
    let logs = std::fs::read_to_string(dir.join("data/logs.jsonl")).unwrap();
    for line in logs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(p) = v["clicked_poi_id"].as_str() {
            return (v["query_text"].as_str().unwrap().to_string(), p.to_string());
        }
    }
    panic!("no clicked record");
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = setup();
    let d = dir.path();

    assert!(ok(d, &with_config(&["ingest"])).contains("invalid_lines\t0"));
    ok(d, &with_config(&["build-graph"]));
    let digest1 = std::fs::read(d.join("run/graph.manifest.json")).unwrap();
    ok(d, &with_config(&["build-graph"]));
    assert_eq!(digest1, std::fs::read(d.join("run/graph.manifest.json")).unwrap());

    ok(d, &with_config(&["train"]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/model.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["d"], 16);
    assert!(manifest["inputs"]["data/logs.jsonl"].as_str().unwrap().len() == 64);

    let table = ok(d, &with_config(&["eval"]));
    assert!(table.contains("lexical"));
    assert!(table.lines().any(|l| l.starts_with("full ")));
    assert!(d.join("run/reports/eval-test.json").exists());

    let (query, _) = first_query(d);
    let text = ok(d, &with_config(&["rank", "--query", &query, "--lat", "0", "--lon", "0", "--top", "5"]));
    let json = ok(
        d,
        &with_config(&["rank", "--query", &query, "--lat", "0", "--lon", "0", "--top", "5", "--json"]),
    );
    let rows: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), lines.len());
    for (row, line) in rows.iter().zip(&lines) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(row["rank"].to_string(), cols[0]);
        assert_eq!(row["poi_id"].as_str().unwrap(), cols[1]);
        assert!((row["score"].as_f64().unwrap() - cols[2].parse::<f64>().unwrap()).abs() < 1e-6);
    }

    let empty = ok(d, &with_config(&["rank", "--query", "x", "--lat", "0", "--lon", "0", "--candidates", ""]));
    assert_eq!(empty.lines().count(), 1);

    let out = run(d, &with_config(&["rank", "--query", "x", "--lat", "0", "--lon", "0", "--candidates", "nope"]));
    assert_eq!(out.status.code(), Some(3));

    ok(d, &with_config(&["export-features", "--out", "run/f.jsonl"]));
    let a = std::fs::read(d.join("run/f.jsonl")).unwrap();
    ok(d, &with_config(&["export-features", "--out", "run/f.jsonl"]));
    assert_eq!(a, std::fs::read(d.join("run/f.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&a).unwrap().lines().next().unwrap()).unwrap();
    let p = first["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(first["features"].as_array().unwrap().len(), 32);

    let mut child = Command::new(BIN)
        .current_dir(d)
        .args(with_config(&["repl", "--top", "2"]))
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    {
        use std::io::Write;
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, "0 0 {query}").unwrap();
        writeln!(stdin, "garbage").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert_eq!(s.matches("rank\tpoi_id").count(), 1);
    assert!(s.contains("expected: LAT LON QUERY"));

    // Training again under other graph settings without rebuilding is refused.
    let out = run(d, &with_config(&["--set", "graph.top_k_queries=2", "train"]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn training_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "build-graph"]);
    ok(d, &["--config", "run.toml", "train"]);
    let first = std::fs::read(d.join("run/model.manifest.json")).unwrap();
    let blob = std::fs::read(d.join("run/model/manifest.json")).unwrap();
    ok(d, &["--config", "run.toml", "train"]);
    assert_eq!(first, std::fs::read(d.join("run/model.manifest.json")).unwrap());
    assert_eq!(blob, std::fs::read(d.join("run/model/manifest.json")).unwrap());
}

#[test]
fn eval_refuses_checkpoint_from_another_graph() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "build-graph"]);
    ok(d, &["--config", "run.toml", "train"]);
    ok(d, &["--config", "run.toml", "--set", "graph.top_k_queries=2", "build-graph"]);
    let out = run(d, &["--config", "run.toml", "--set", "graph.top_k_queries=2", "eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(d, &["--config", "run.toml", "--set", "train.batch_size=1", "ingest"]).status.code(), Some(2));
    assert_eq!(run(d, &["--config", "run.toml", "--set", "nope.key=1", "ingest"]).status.code(), Some(2));
    assert_eq!(run(d, &["--config", "run.toml", "--logs", "missing.jsonl", "ingest"]).status.code(), Some(3));
    assert_eq!(run(d, &["--config", "run.toml", "eval"]).status.code(), Some(3));

    let mut logs = std::fs::read_to_string(d.join("data/logs.jsonl")).unwrap();
    logs.push_str("{not json\n");
    std::fs::write(d.join("data/bad.jsonl"), logs).unwrap();
    let out = run(d, &["--config", "run.toml", "--logs", "data/bad.jsonl", "ingest"]);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/ingest.json")).unwrap()).unwrap();
    assert_eq!(report["validation"]["errors"].as_array().unwrap().len(), 1);
}

#[test]
fn gradcheck_passes_and_fails_by_threshold() {
    let dir = setup();
    let d = dir.path();
    let out = ok(d, &["--config", "run.toml", "gradcheck", "--per-param", "8"]);
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max_rel_error\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4);
    // A huge step crosses nonlinearities and must be reported as a failure.
    let bad = run(d, &["--config", "run.toml", "gradcheck", "--per-param", "8", "--epsilon", "0.5"]);
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn flags_override_config_file() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "--work-dir", "other", "--set", "train.epochs=1", "build-graph"]);
    assert!(d.join("other/graph").exists());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("other/graph.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["epochs"], 1);
    assert_eq!(m["config"]["model"]["d"], 16);
}
