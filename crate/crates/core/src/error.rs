use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid mask: every entry of a softmax row is masked")]
    InvalidMask,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training state: {0}")]
    TrainingState(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation: {0}")]
    Validation(String),

    #[error("data: {0}")]
    Data(String),

    #[error("unknown {kind} `{id}`")]
    Lookup { kind: &'static str, id: String },

    #[error("graph integrity: {0}")]
    GraphIntegrity(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
