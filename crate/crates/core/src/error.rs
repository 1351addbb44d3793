use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CvError>;

#[derive(Debug, Error)]
pub enum CvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset structure error: {0}")]
    Structure(String),
    #[error("missing view directory: {path}")]
    MissingViewDir { path: PathBuf },
    #[error("location {location_id} has no images")]
    EmptyLocation { location_id: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error at {path}: {source}")]
    Serde {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing caption for item: {0}")]
    MissingCaption(String),
    #[error("training step error: {0}")]
    TrainStep(String),
    #[error("non-finite loss component: {0}")]
    NonFiniteLoss(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CvError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CvError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn serde(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CvError::Serde {
            path: path.into(),
            source,
        }
    }
}
