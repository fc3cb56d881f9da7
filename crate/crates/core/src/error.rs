use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("task index {index} out of range for {num_tasks} task(s)")]
    TaskIndex { index: usize, num_tasks: usize },

    #[error("forward cache does not match this batch: {0}")]
    StaleCache(String),

    #[error("non-finite loss {loss} at step {step} (task {task})")]
    NonFiniteLoss { step: u64, task: usize, loss: f64 },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset file error: {0}")]
    Dataset(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
