use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::{OpKind, Shape};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: OpKind, lhs: Shape, rhs: Shape },

    #[error("{op}: input {value} is outside the domain (must be > 0)")]
    Domain { op: OpKind, value: f64 },

    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot(Shape),

    #[error("backward already ran on this tape; call zero_grad before running it again")]
    StaleTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Divergence {
        step: usize,
        epoch: usize,
        detail: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0}: dataset is empty")]
    EmptyDataset(PathBuf),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("model file: parameter {param} has shape {found:?}, config implies {expected:?}")]
    ModelShape {
        param: String,
        expected: Shape,
        found: Shape,
    },

    #[error("model file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Domain { .. } => "domain",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::StaleTape => "stale_tape",
            Error::NonFinite(_) => "non_finite",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::ModelFormat(_) => "model_format",
            Error::ModelShape { .. } => "model_shape",
            Error::Checksum { .. } => "checksum",
        }
    }
}
