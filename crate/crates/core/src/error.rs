use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("parameter set `{0}` is frozen")]
    Frozen(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("failed to load entry `{id}`: {reason}")]
    Load { id: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    /// Short stable tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidConfig(_) => "invalid-config",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Generation(_) => "generation",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::NonFinite { .. } => "non-finite",
            Error::Frozen(_) => "frozen",
            Error::Checkpoint(_) => "checkpoint",
            Error::Load { .. } => "load",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
