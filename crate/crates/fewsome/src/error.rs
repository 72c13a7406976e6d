//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset files missing or malformed.
    #[error("failed to load dataset from {path}: {reason}")]
    DataLoad { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Tensor or embedding dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// PRETRAINED init requested but no usable weights file was found.
    /// Never silently falls back to random init.
    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),

    /// Training loss became NaN or infinite.
    #[error(
        "training diverged at epoch {epoch}: loss became non-finite \
         (last finite epoch loss {last_finite})"
    )]
    NonFiniteLoss { epoch: usize, last_finite: f64 },

    /// An operation was invoked out of its valid lifecycle phase,
    /// e.g. anchor capture after weight updates started.
    #[error("operation out of order: {0}")]
    Sequencing(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("record store error: {0}")]
    Records(String),

    #[error("empty input: {0}")]
    EmptyInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::DataLoad {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
