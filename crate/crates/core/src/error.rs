use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the grounding pipeline.
#[derive(Debug, Error)]
pub enum EtaError {
    #[error("{path}:{line}: invalid field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("instance `{id}` encodes to {len} positions, exceeding max length {max}")]
    Length { id: String, len: usize, max: usize },
    #[error("training diverged at epoch {epoch} (learning rate {lr}): non-finite loss")]
    Divergence { epoch: usize, lr: f64 },
    #[error("data mismatch: {0}")]
    Mismatch(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EtaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EtaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        EtaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error class: 2 config, 3 data mismatch,
    /// 4 missing artifact, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            EtaError::Config { .. } => 2,
            EtaError::Parse { .. }
            | EtaError::Validation(_)
            | EtaError::Mismatch(_)
            | EtaError::Length { .. }
            | EtaError::Shape(_) => 3,
            EtaError::MissingArtifact(_) | EtaError::Io { .. } => 4,
            EtaError::Divergence { .. } => 5,
            EtaError::Json(_) => 3,
        }
    }
}

pub type Result<T, E = EtaError> = std::result::Result<T, E>;
