use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcrsError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("unknown parameter group `{0}`")]
    UnknownParam(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient while processing user `{user}`")]
    NonFiniteGradient { user: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CcrsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CcrsError::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, CcrsError::Io { .. } | CcrsError::NonFiniteGradient { .. })
    }
}

pub type Result<T> = std::result::Result<T, CcrsError>;
