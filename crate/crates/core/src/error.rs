use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SluError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SluError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss does not depend on any tensor that requires grad")]
    NotOnTape,

    #[error("graph already consumed by a previous backward call")]
    GraphConsumed,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{path}:{line}: record `{record}`: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        record: String,
        msg: String,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SluError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SluError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SluError::Io {
            path: path.into(),
            source,
        }
    }
}
