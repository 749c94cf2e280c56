use thiserror::Error;

use crate::domain::Config;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fit diverged")]
    FitDiverged,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unstable: offered load exceeds capacity at {config} (queue reached {queue_len})")]
    Unstable { config: Config, queue_len: usize },

    #[error("GP degenerate")]
    GpDegenerate,

    #[error("measurement failed: {0}")]
    Measurement(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
