use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("tracker error: {0}")]
    Tracker(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
