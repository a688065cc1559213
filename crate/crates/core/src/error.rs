//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its contract (shape mismatch,
    /// out-of-range index, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input values outside the mathematical domain of an operation
    /// (non-positive std, rows that do not sum to one, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint/dataset container could not be read, or its header does
    /// not match what the caller requires.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A NaN or non-finite value was produced where finite values are
    /// required; carries a short diagnostic.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Scripted data generation exhausted its retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
