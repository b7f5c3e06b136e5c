use std::path::PathBuf;

use seqinsert_tensor::TensorError;
use thiserror::Error;

/// Failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("spacing must be positive and finite, got {0}")]
    NonPositiveSpacing(f64),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unknown key slice name `{0}`")]
    UnknownKey(String),
    #[error("duplicate label for volume `{volume_id}`, key `{key}`")]
    DuplicateLabel { volume_id: String, key: String },
    #[error("unknown volume `{0}`")]
    UnknownVolume(String),
    #[error("slice index {index} out of range for volume `{volume_id}` with {n_slices} slices")]
    IndexOutOfRange {
        volume_id: String,
        index: usize,
        n_slices: usize,
    },
    #[error("key slice indices are not increasing in anatomical order for volume `{0}`")]
    NonMonotoneLabels(String),
    #[error("need at least 2 key slice labels, got {0}")]
    InsufficientLabels(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("split violation: {0}")]
    SplitViolation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Tensor(TensorError::NonFiniteGradient { .. }) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
