use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
