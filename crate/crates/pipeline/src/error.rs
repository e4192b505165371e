use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] incdet_core::Error),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("trainer service error: {0}")]
    Service(String),

    #[error("task '{0}' not found")]
    NotFound(String),

    #[error("model transfer failed: {0}")]
    Transfer(String),

    #[error("new snapshot failed validation: {0}")]
    Validation(String),

    #[error("learning was not approved")]
    Declined,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
