use thiserror::Error;

/// Errors produced by the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (shape mismatch, bad
    /// hyperparameter, index out of range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file did not conform to the expected on-disk format. `offset` is the
    /// byte position at which decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
