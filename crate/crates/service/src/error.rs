use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use crate::store::SessionSummary;

/// Error returned by every endpoint as `{code, message, current_state}`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub current_state: Option<Box<SessionSummary>>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
    current_state: Option<&'a SessionSummary>,
}

impl ServiceError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ServiceError { status, code: code.to_owned(), message: message.into(), current_state: None }
    }

    pub fn config(message: impl Into<String>) -> Self {
        ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, "config", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ServiceError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn with_state(mut self, state: SessionSummary) -> Self {
        self.current_state = Some(Box::new(state));
        self
    }
}

impl From<drscreen_core::Error> for ServiceError {
    fn from(e: drscreen_core::Error) -> Self {
        use drscreen_core::Error as E;
        let status = match &e {
            E::Authorization(_) => StatusCode::FORBIDDEN,
            E::UnknownSession(_) => StatusCode::NOT_FOUND,
            E::Conflict(_) | E::Sequencing(_) | E::Protocol(_) => StatusCode::CONFLICT,
            E::EventLog(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ServiceError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: &self.code, message: &self.message, current_state: self.current_state.as_deref() };
        (self.status, Json(body)).into_response()
    }
}
