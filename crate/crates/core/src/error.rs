use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LgError>;

#[derive(Debug, Error)]
pub enum LgError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("frozen parameters changed during stage 2 (epoch {epoch})")]
    FrozenDrift { epoch: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt file {}: {detail}", .path.display())]
    Corrupt { path: PathBuf, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LgError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LgError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Not-found errors become [`LgError::MissingFile`].
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return LgError::MissingFile(path);
        }
        LgError::Io { path, source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        LgError::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
