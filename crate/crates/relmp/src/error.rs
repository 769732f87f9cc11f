//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading or validating data and configuration.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{path}:{line}: malformed triple line (expected 3 tab-separated fields, got {fields})")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        fields: usize,
    },

    #[error("{path}:{line}: malformed dictionary line: {reason}")]
    MalformedDict {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("empty training set in {0}")]
    EmptyTrainingSet(PathBuf),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in tensor `{tensor}` at {context}")]
    NonFinite { tensor: String, context: String },

    #[error("relation count mismatch: checkpoint has {checkpoint}, dataset has {dataset}")]
    RelationCountMismatch { checkpoint: usize, dataset: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("path cache error: {0}")]
    PathCache(String),

    #[error("{0}")]
    Analysis(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
