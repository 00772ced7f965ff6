use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after preprocessing")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    #[error("user history is empty")]
    EmptyHistory,

    #[error("could not parse LLM response after {attempts} attempts: {message}")]
    LlmParse { attempts: usize, message: String },

    #[error("no fixture recorded for key {key}")]
    FixtureMiss { key: String },

    #[error("LLM transport error: {0}")]
    LlmTransport(String),

    #[error("invalid token usage: {0}")]
    InvalidUsage(String),

    #[error("degenerate hypergraph: {0}")]
    DegenerateHypergraph(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("unknown item: {0}")]
    UnknownItem(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
