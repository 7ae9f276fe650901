use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PicError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PicError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch norm running statistics are uninitialized; run a train-mode pass first")]
    UninitializedStats,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PicError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        PicError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PicError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PicError::Io {
            path: path.into(),
            source,
        }
    }
}
