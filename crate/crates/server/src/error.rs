use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pyraflow::orchestration::PipelineError;
use serde::Serialize;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub line: Option<usize>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    line: Option<usize>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), line: None }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }

    /// Script errors become 400 with the offending line; anything else is a server fault.
    pub fn from_pipeline(e: PipelineError) -> Self {
        match e {
            PipelineError::Syntax { line, message } | PipelineError::Invalid { line, message } => {
                Self { status: StatusCode::BAD_REQUEST, message, line: (line > 0).then_some(line) }
            }
            PipelineError::Tissue(t) => Self::bad_request(t.to_string()),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(Body { error: &self.message, line: self.line })).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
