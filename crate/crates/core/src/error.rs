//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration (bad field values, unknown tags).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input rejected by a precondition (dimension mismatch, out-of-domain value).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Model evaluation failed; `index` is the offending observation index when known.
    #[error("evaluation error: {message}{}", index.map(|i| format!(" (observation {i})")).unwrap_or_default())]
    Eval {
        message: String,
        index: Option<usize>,
    },

    /// A numerical routine could not complete (factorization, optimizer breakdown).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A sampler was driven into a state with zero target density.
    #[error("invalid chain state: {0}")]
    InvalidState(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn eval(message: impl Into<String>, index: Option<usize>) -> Self {
        Error::Eval {
            message: message.into(),
            index,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
