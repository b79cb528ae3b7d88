use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("session {0} is complete")]
    Closed(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] hiersample::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::UnknownModel(_) | ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Closed(_) => StatusCode::CONFLICT,
            ServiceError::Model(hiersample::Error::InvalidArgument(_) | hiersample::Error::TooLong { .. }) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::Io(_) | ServiceError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.to_string() }));
        (self.status(), body).into_response()
    }
}
