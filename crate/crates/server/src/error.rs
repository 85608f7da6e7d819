use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use brushwork::{Error, Violation};
use serde::Serialize;

/// A JSON error body: `{"error": code, "message": ..., "violations": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub violations: Vec<Violation>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "<[Violation]>::is_empty")]
    violations: &'a [Violation],
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    /// The request arrived out of order, e.g. a blend before its levels.
    pub fn sequencing(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "sequencing", message)
    }

    pub fn too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "too_large", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            Error::Parameter(v) => {
                return Self {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    code: "invalid_parameters",
                    message,
                    violations: v.clone(),
                }
            }
            Error::Shape(_) => (StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch"),
            Error::Input(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            Error::Image(_) => (StatusCode::BAD_REQUEST, "undecodable_image"),
            Error::Config(_) => (StatusCode::SERVICE_UNAVAILABLE, "configuration"),
            Error::Resource(_) => (StatusCode::PAYLOAD_TOO_LARGE, "resource_limit"),
            Error::Transport { .. } => (StatusCode::BAD_GATEWAY, "upstream"),
            Error::JobNotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.message);
        }
        let body = Body {
            error: self.code,
            message: &self.message,
            violations: &self.violations,
        };
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
