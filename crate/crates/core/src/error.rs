use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or architecture; `key` names the offending item.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error at sample {position}: {msg}")]
    Data { position: usize, msg: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Tensor cannot be centralized (1-D, or reduction length 1).
    #[error("tensor of shape {shape:?} is not centralizable")]
    NotCentralizable { shape: Vec<usize> },

    #[error("local training of client {client} diverged at step {step}: {what} is non-finite")]
    RoundFailure {
        client: usize,
        step: usize,
        what: &'static str,
    },

    #[error("IDX format error in {path:?} at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
