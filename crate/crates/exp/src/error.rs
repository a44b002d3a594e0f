use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    /// Invalid or unreadable configuration; `field` is a dotted path such as
    /// `training.eta_local` or `clients[2].class_prior`.
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Sim(#[from] feddwa_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExpError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ExpError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for configuration problems, 2 for everything
    /// that goes wrong afterwards.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Config { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExpError>;
