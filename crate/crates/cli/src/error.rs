use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] poigraph::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("gradient check failed: max relative error {max:e} at {param}[{index}]")]
    GradCheck { max: f64, param: String, index: usize },

    #[error("{count} invalid log line(s); see the ingest report")]
    InvalidLines { count: usize },
}

impl CliError {
    /// 2 usage, 3 data validation, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use poigraph::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::InvalidLines { .. } => 3,
            CliError::GradCheck { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Dimension { .. } | E::InvalidMask | E::NonFinite { .. } | E::TrainingState(_) => 4,
                _ => 3,
            },
        }
    }
}
