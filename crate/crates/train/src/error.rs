use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] derprop_core::Error),
    #[error(transparent)]
    Io(#[from] derprop_core::io::IoError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite {term} loss in epoch {epoch}")]
    NonFinite { epoch: usize, term: &'static str },
    #[error("parameter vectors differ in length: momentum {momentum}, live {live}")]
    LengthMismatch { momentum: usize, live: usize },
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;
