//! One error type for the service and the command line, carrying a stable
//! code, an HTTP status, and a process exit code.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use umivr_core::embedder::EmbedError;
use umivr_core::embedding_store::StoreError;
use umivr_core::eval::EvalError;
use umivr_core::llm_gateway::GatewayError;
use umivr_core::session::SessionError;
use umivr_core::tqfs::TqfsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    NotFound,
    Conflict,
    Backend,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct AppError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody<'a> {
    pub code: &'a str,
    pub message: &'a str,
}

impl AppError {
    pub fn new(kind: ErrorKind, code: &'static str, message: impl Into<String>) -> Self {
        Self { kind, code, message: message.into() }
    }

    pub fn validation(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, code, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, "io_error", message)
    }

    pub fn status(&self) -> StatusCode {
        match self.kind {
            ErrorKind::Validation => StatusCode::BAD_REQUEST,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Backend => StatusCode::BAD_GATEWAY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// 1 for bad input or state, 2 for backend and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation | ErrorKind::NotFound | ErrorKind::Conflict => 1,
            ErrorKind::Backend | ErrorKind::Internal => 2,
        }
    }

    pub fn body(&self) -> ErrorBody<'_> {
        ErrorBody { code: self.code, message: &self.message }
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<GatewayError> for AppError {
    fn from(e: GatewayError) -> Self {
        let code = match &e {
            GatewayError::UnboundPlaceholder(_) => "unbound_placeholder",
            GatewayError::BackendTimeout(_) => "backend_timeout",
            GatewayError::BackendRefusal(_) => "backend_refusal",
            GatewayError::ParseFailure { .. } => "backend_parse_failure",
            GatewayError::EmptyGeneration => "empty_generation",
            GatewayError::Unsupported(_) => "backend_unsupported",
            GatewayError::Transport(_) => "backend_transport",
            GatewayError::InvalidInput(_) => return Self::validation("invalid_input", e.to_string()),
            GatewayError::MockTable(_) => "mock_table",
        };
        Self::new(ErrorKind::Backend, code, e.to_string())
    }
}

impl From<EmbedError> for AppError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyText => Self::validation("empty_text", e.to_string()),
            EmbedError::Vector(v) => v.into(),
            EmbedError::Backend(_) => Self::new(ErrorKind::Backend, "embedder_failure", e.to_string()),
        }
    }
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::EmptyIndex => Self::validation("empty_index", msg),
            StoreError::InvalidK => Self::validation("invalid_k", msg),
            StoreError::DuplicateId(_) => Self::new(ErrorKind::Conflict, "duplicate_id", msg),
            StoreError::UnknownId(_) => Self::new(ErrorKind::NotFound, "unknown_id", msg),
            StoreError::TooManyItems { .. } => Self::validation("too_many_items", msg),
            StoreError::ZeroVector
            | StoreError::DimensionMismatch { .. }
            | StoreError::NotUnitNorm { .. }
            | StoreError::NonFinite => Self::new(ErrorKind::Backend, "bad_embedding", msg),
            StoreError::FormatVersionMismatch(_) | StoreError::Metadata { .. } => {
                Self::new(ErrorKind::Internal, "bad_index_file", msg)
            }
            StoreError::Io(_) => Self::io(msg),
        }
    }
}

impl From<SessionError> for AppError {
    fn from(e: SessionError) -> Self {
        let msg = e.to_string();
        match e {
            SessionError::EmptyQuery => Self::validation("empty_query", msg),
            SessionError::EmptyIndex => Self::validation("empty_index", msg),
            SessionError::InvalidConfig(_) => Self::validation("invalid_config", msg),
            SessionError::MissingAnswer => Self::validation("missing_answer", msg),
            SessionError::MissingTarget(_) => Self::validation("unknown_target", msg),
            SessionError::NoTarget => Self::validation("no_target", msg),
            SessionError::WrongStatus { .. } => Self::new(ErrorKind::Conflict, "wrong_status", msg),
            SessionError::NotFound(_) => Self::new(ErrorKind::NotFound, "session_not_found", msg),
            SessionError::SchemaVersion { .. } | SessionError::Snapshot(_) => {
                Self::new(ErrorKind::Internal, "bad_snapshot", msg)
            }
            SessionError::Embed(e) => e.into(),
            SessionError::Store(e) => e.into(),
            SessionError::Uncertainty(_) => Self::new(ErrorKind::Internal, "uncertainty", msg),
            SessionError::Gateway(e) => e.into(),
            SessionError::Io(_) => Self::io(msg),
        }
    }
}

impl From<TqfsError> for AppError {
    fn from(e: TqfsError) -> Self {
        let msg = e.to_string();
        match e {
            TqfsError::Decode { .. } | TqfsError::TruncatedStream | TqfsError::Io(_) => Self::io(msg),
            TqfsError::Vector(v) => v.into(),
            TqfsError::Embed(_) => Self::new(ErrorKind::Backend, "frame_embedding", msg),
            _ => Self::validation("invalid_frames", msg),
        }
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::Session(s) => s.into(),
            EvalError::Bench { .. } | EvalError::NoTraces | EvalError::InvalidK => {
                Self::validation("invalid_benchmark", msg)
            }
            EvalError::RoundOutOfRange { .. } => Self::validation("round_out_of_range", msg),
            EvalError::Json(_) => Self::new(ErrorKind::Internal, "json", msg),
            EvalError::Io(_) => Self::io(msg),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
