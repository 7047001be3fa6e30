use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition (shapes, normalization, layout).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown synthetic task `{0}`")]
    UnknownTask(String),

    #[error("sequence too long: {what} has {len} tokens, limit is {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("no corpus sequence is consistent with the observed tokens")]
    NoSupport,

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("embedding protocol error: {0}")]
    Protocol(String),

    #[error("embedding endpoint failed after {attempts} attempts: {msg}")]
    Remote { attempts: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
