//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
///
/// Numeric routines report precondition violations as `InvalidArgument`,
/// inputs that make a computation meaningless (zero vectors, empty sets) as
/// `DegenerateInput`, and quantities with no defined value as
/// `UndefinedMetric`. File interfaces add `Format` and `Io`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
