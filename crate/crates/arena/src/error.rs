use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use negolab_core::env::{EnvError, Rule};
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use crate::session::Phase;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("illegal act: {rule}")]
    IllegalAct { rule: Rule },
    #[error("it is not your turn")]
    WrongTurn,
    #[error("session is {found:?}, expected {expected:?}")]
    WrongPhase { expected: Phase, found: Phase },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt event log {path}: {message}")]
    CorruptLog { path: String, message: String },
    #[error("registry: {0}")]
    Registry(String),
    #[error("agent failed: {0}")]
    Agent(String),
}

impl ArenaError {
    pub fn status(&self) -> StatusCode {
        match self {
            ArenaError::UnknownModel(_) | ArenaError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ArenaError::IllegalAct { .. } | ArenaError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ArenaError::WrongTurn | ArenaError::WrongPhase { .. } => StatusCode::CONFLICT,
            ArenaError::Io(_) | ArenaError::CorruptLog { .. } | ArenaError::Registry(_) | ArenaError::Agent(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ArenaError::UnknownModel(_) => "unknown_model",
            ArenaError::UnknownSession(_) => "unknown_session",
            ArenaError::IllegalAct { rule } => rule.name(),
            ArenaError::WrongTurn => "wrong_turn",
            ArenaError::WrongPhase { .. } => "wrong_phase",
            ArenaError::Invalid(_) => "invalid_request",
            _ => "internal",
        }
    }
}

impl From<EnvError> for ArenaError {
    fn from(error: EnvError) -> Self {
        match error {
            EnvError::IllegalAct { rule, .. } => ArenaError::IllegalAct { rule },
            EnvError::WrongSpeaker { .. } => ArenaError::WrongTurn,
            other => ArenaError::Invalid(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ArenaError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(ErrorBody { error: self.code(), message: self.to_string() })).into_response()
    }
}
