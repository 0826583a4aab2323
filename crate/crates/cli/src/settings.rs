//! Config resolution and run manifests.

use std::path::{Path, PathBuf};

use poigraph::config::RunConfig;
use poigraph::numerics::checkpoint::stored_digest;
use poigraph::util::{sha256_file, write_atomic};
use serde_json::{json, Value};

use crate::args::GlobalArgs;
use crate::error::{CliError, CliResult};

/// Config file (or defaults) with flags applied on top; flags win.
pub fn resolve(global: &GlobalArgs) -> CliResult<RunConfig> {
    let text = match &global.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| poigraph::Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let base = RunConfig::from_toml(&text)?;
    let mut value = toml::Value::try_from(&base).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut sets: Vec<(String, toml::Value)> = Vec::new();
    for s in &global.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`--set {s}` is not KEY=VALUE")))?;
        sets.push((k.trim().to_string(), parse_value(v.trim())));
    }
    let path_str = |p: &Path| toml::Value::String(p.display().to_string());
    if let Some(seed) = global.seed {
        sets.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(p) = &global.work_dir {
        sets.push(("paths.work_dir".into(), path_str(p)));
    }
    if let Some(p) = &global.catalog {
        sets.push(("paths.catalog".into(), path_str(p)));
    }
    if let Some(p) = &global.logs {
        sets.push(("paths.logs".into(), path_str(p)));
    }
    if let Some(p) = &global.precision {
        sets.push(("precision".into(), toml::Value::String(p.clone())));
    }
    for (k, v) in sets {
        set_path(&mut value, &k, v)?;
    }
    let text = toml::to_string(&value).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(RunConfig::from_toml(&text)?)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, v: toml::Value) -> CliResult<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{key}` does not name a config key")))?;
        if !table.contains_key(*part) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            table.insert(part.to_string(), v);
            return Ok(());
        }
        cur = table.get_mut(*part).expect("checked above");
    }
    Err(CliError::Usage("empty config key".into()))
}

/// File digest, or the stored manifest digest of a container directory.
fn digest(path: &Path) -> CliResult<String> {
    Ok(if path.is_dir() { stored_digest(path)? } else { sha256_file(path)? })
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Writes `<artifact>.manifest.json`: command, full config, fingerprints,
/// input and output digests and versions.
pub fn write_manifest(
    artifact: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    extra: Value,
) -> CliResult<()> {
    let mut digests = serde_json::Map::new();
    for p in inputs {
        digests.insert(p.display().to_string(), Value::String(digest(p)?));
    }
    let manifest = json!({
        "command": command,
        "artifact": artifact.display().to_string(),
        "artifact_sha256": digest(artifact)?,
        "fingerprint": cfg.fingerprint(),
        "graph_fingerprint": cfg.graph_fingerprint(),
        "config": cfg,
        "inputs": digests,
        "versions": {
            "poigraph": env!("CARGO_PKG_VERSION"),
            "graph_format": poigraph::graphbuild::GRAPH_VERSION,
            "checkpoint_format": poigraph::numerics::checkpoint::CHECKPOINT_VERSION,
        },
        "extra": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(poigraph::Error::from)?;
    write_atomic(&manifest_path(artifact), text.as_bytes())?;
    Ok(())
}

pub fn read_manifest(artifact: &Path) -> CliResult<Value> {
    let path = manifest_path(artifact);
    let text = std::fs::read_to_string(&path).map_err(|e| poigraph::Error::Io { path: path.clone(), source: e })?;
    Ok(serde_json::from_str(&text).map_err(|e| poigraph::Error::Load {
        path,
        msg: e.to_string(),
    })?)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| poigraph::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}
