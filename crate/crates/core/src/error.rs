use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the downscaling toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("coordinates are not strictly monotone: {0}")]
    NonMonotone(String),

    #[error("invalid grid stack: {0}")]
    InvalidStack(String),

    #[error("time axes are misaligned: {0}")]
    Misaligned(String),

    #[error("all cells are missing")]
    AllMissing,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("test-period data reached a fit: {0}")]
    Leakage(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
