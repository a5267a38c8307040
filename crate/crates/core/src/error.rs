use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LmdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LmdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: dimension {got} is not a multiple of {multiple}")]
    NotMultiple {
        what: &'static str,
        got: usize,
        multiple: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric {0} is undefined for this log")]
    Undefined(&'static str),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv {path}: line {line}: {reason}")]
    Csv { path: PathBuf, line: usize, reason: String },
}

impl LmdError {
    /// Stable short tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            LmdError::ShapeMismatch { .. } | LmdError::NotMultiple { .. } => "shape",
            LmdError::Config(_) => "config",
            LmdError::InvalidArgument(_) => "argument",
            LmdError::NonFinite(_) => "non_finite",
            LmdError::Undefined(_) => "undefined",
            LmdError::Checkpoint { .. } => "checkpoint",
            LmdError::Io { .. } => "io",
            LmdError::Image { .. } => "image",
            LmdError::Csv { .. } => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LmdError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
