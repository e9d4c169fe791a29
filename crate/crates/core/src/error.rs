use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The byte stream is not a label store or feature file (bad magic, truncated, trailing bytes).
    #[error("format error: {0}")]
    Format(String),

    /// The stream parsed but violates a store invariant.
    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Optimization { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
