use thiserror::Error;

/// Failures surfaced by the CLI and the HTTP API.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] fqc_core::Error),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no active model")]
    NoActiveModel,

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("unsupported media type {0:?}; send image/png or image/x-portable-pixmap")]
    UnsupportedMedia(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
