//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed input file (CoNLL-U, JSONL, config). Carries a line number
    /// when one is known.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Shape disagreement between tensors; names both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data value (e.g. label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// The gradient-check oracle detected a problem with the function under
    /// test (e.g. non-determinism).
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            msg: msg.into(),
        }
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for the CLI: 1 for malformed input, 2 for
    /// contract/config violations. Gradcheck failures use 3 and are handled
    /// separately (they are a result, not an error).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Dimension(_) | Error::Contract(_) | Error::Config(_) | Error::Oracle(_) => 2,
        }
    }
}
