use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmicError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("failed to load {what} from {path}: {source}")]
    Load {
        what: String,
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Tensor(#[from] diffcore::Error),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GmicError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Data(_) | Self::Load { .. } | Self::Io { .. } | Self::Json(_) => 3,
            Self::Numeric(_) | Self::UndefinedMetric(_) => 4,
            Self::Tensor(e) => match e {
                diffcore::Error::NonFinite { .. } => 4,
                diffcore::Error::Checkpoint(_) | diffcore::Error::Io(_) => 3,
                _ => 4,
            },
        }
    }
}

pub type Result<T, E = GmicError> = std::result::Result<T, E>;
