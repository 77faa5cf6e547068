use diffalloc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{op}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },
    #[error("hash mismatch for {path}: manifest has {expected}, file has {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("config of {path} differs from the one that produced it:\n  {}", diff.join("\n  "))]
    ConfigMismatch { path: String, diff: Vec<String> },
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 input error, 2 numerical failure, 3 hash mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            Error::HashMismatch { .. } | Error::ConfigMismatch { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
