use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VopError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VopError {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sampling error: no {0} image pairs available")]
    Sampling(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl VopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VopError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            VopError::Io { .. } | VopError::Csv(_) => 2,
            VopError::Numerical(_) => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            VopError::Format(_) => "format",
            VopError::Corruption(_) => "corruption",
            VopError::Validation(_) | VopError::DimensionMismatch { .. } => "validation",
            VopError::Sampling(_) => "sampling",
            VopError::Numerical(_) => "numerical",
            VopError::UnknownImage(_) => "unknown_image",
            VopError::Io { .. } => "io",
            VopError::Json(_) => "json",
            VopError::Csv(_) => "csv",
        }
    }
}
