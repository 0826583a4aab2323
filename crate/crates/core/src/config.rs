//! Run configuration: one TOML file with sections, fingerprinted into
//! every artifact it produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::DEFAULT_SESSION_TIMEOUT_S;
use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_PREFILTER_N;
use crate::graphbuild::GraphConfig;
use crate::numerics::DType;
use crate::ranker::{ModelConfig, TrainConfig};
use crate::util::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    pub logs: PathBuf,
    /// Directory receiving graph, checkpoint, vocabulary and reports.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            catalog: "data/catalog.jsonl".into(),
            logs: "data/logs.jsonl".into(),
            work_dir: "run".into(),
        }
    }
}

impl PathsConfig {
    pub fn graph(&self) -> PathBuf {
        self.work_dir.join("graph")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.work_dir.join("model")
    }

    pub fn reports(&self) -> PathBuf {
        self.work_dir.join("reports")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub session_timeout_s: i64,
    pub train_frac: f64,
    pub valid_frac: f64,
    /// Candidate count when a search has no logged shown list.
    pub prefilter_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            session_timeout_s: DEFAULT_SESSION_TIMEOUT_S,
            train_frac: 0.8,
            valid_frac: 0.1,
            prefilter_n: DEFAULT_PREFILTER_N,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parameter precision of training and inference.
    pub precision: DType,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: DType::F32,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.session_timeout_s <= 0 {
            return Err(Error::Config("session_timeout_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.train_frac)
            || !(0.0..=1.0).contains(&d.valid_frac)
            || d.train_frac + d.valid_frac > 1.0
        {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form, excluding paths.
    pub fn fingerprint(&self) -> String {
        let mut canon = serde_json::to_value(self).expect("config serializes");
        canon.as_object_mut().expect("object").remove("paths");
        sha256_hex(canon.to_string().as_bytes())
    }

    /// Fingerprint of the settings a graph artifact depends on.
    pub fn graph_fingerprint(&self) -> String {
        let canon = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "graph": self.graph,
        });
        sha256_hex(canon.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.model.d, c.model.d_c, c.graph.d_n), (128, 64, 128));
        assert_eq!(c.model.layer_widths, vec![128, 256]);
        assert_eq!((c.model.heads, c.model.max_len), (4, 30));
        assert_eq!((c.train.batch_size, c.train.epochs), (64, 40));
        assert_eq!((c.train.lr, c.model.dropout), (0.001, 0.5));
        assert_eq!(c.graph.top_k_queries, 4);
    }

    #[test]
    fn partial_file_fills_defaults_and_changes_fingerprint() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_ne!(cfg.fingerprint(), RunConfig::default().fingerprint());
        let moved = RunConfig {
            paths: PathsConfig {
                work_dir: "elsewhere".into(),
                ..Default::default()
            },
            ..cfg.clone()
        };
        assert_eq!(moved.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch_size = 1\n").is_err());
        assert!(RunConfig::from_toml("[data]\ntrain_frac = 0.95\nvalid_frac = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nvariant = \"nope\"\n").is_err());
    }
}
