//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A line budget is out of range or already exhausted.
    #[error("budget error: {0}")]
    Budget(String),

    /// An API contract was violated (non-scalar loss, unnormalized policy, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A reference signal that must be nonzero was all-zero.
    #[error("undefined reference: {0}")]
    UndefinedReference(String),

    /// An iterative solver produced non-finite values.
    #[error("divergence at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    /// Malformed on-disk data; names the offending field.
    #[error("format error in {path}: {what}")]
    Format { path: String, what: String },

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn budget(msg: impl Into<String>) -> Self {
        Error::Budget(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
