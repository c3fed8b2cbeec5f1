use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SnnError>;

#[derive(Debug, Error)]
pub enum SnnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value in {what} of layer `{layer}`")]
    NonFinite { layer: String, what: &'static str },

    #[error("backward called on a value that no recorded forward operation produced")]
    BackwardBeforeForward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("gradients requested before backward ran")]
    NoGradients,

    #[error("unknown pruning schedule `{name}` (valid: {valid})")]
    UnknownSchedule { name: String, valid: String },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SnnError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        SnnError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SnnError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
