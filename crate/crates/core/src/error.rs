use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("non-finite voxel value in {path} at linear offset {offset}")]
    NonFiniteVoxel { path: PathBuf, offset: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fitting infeasible: {0}")]
    FitInfeasible(String),

    #[error("degenerate pipeline state: {0}")]
    Degenerate(String),

    #[error("unknown strategy {kind:?} for {registry}; known: {known:?}")]
    UnknownStrategy {
        registry: &'static str,
        kind: String,
        known: Vec<&'static str>,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        PipelineError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
