use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("shape mismatch: expected {expected} entries, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear solve is ill-conditioned (residual {residual:e})")]
    IllConditioned { residual: f64 },

    #[error("trajectory enumeration infeasible: {count} weighted paths exceed the cap of {cap}")]
    EnumerationInfeasible { count: u128, cap: u128 },

    #[error("anchor for agent {agent} was computed at a different global parameter")]
    StaleAnchor { agent: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
