//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by model construction, numerics, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two containers that must agree in shape did not.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A numeric quantity left its valid domain (NaN, negative variance, ...).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A sampling or placement routine exhausted its retry budget.
    #[error("retry budget exhausted: {0}")]
    RetriesExhausted(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not conform to the expected format.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(path: impl ToString, message: impl ToString) -> Self {
        Error::Format {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}
