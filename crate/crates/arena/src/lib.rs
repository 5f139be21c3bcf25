//! HTTP service for live negotiations between people and trained agents,
//! with the post-negotiation survey and a per-participant study sequence.
//!
//! Sessions are persisted as append-only JSON-lines event logs and rebuilt
//! on startup. Agents are loaded read-only from a model directory.

pub mod error;
pub mod registry;
pub mod service;
pub mod session;
pub mod store;
pub mod survey;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use uuid::Uuid;

pub use error::ArenaError;
pub use registry::ModelRegistry;
pub use service::Arena;

use service::{CreateSession, ModelSummary, SelectionRequest, StudyStep};
use session::{ActPayload, SessionView};
use survey::SurveyAnswers;

#[derive(Debug, Clone)]
pub struct ArenaConfig {
    pub listen: SocketAddr,
    pub models: PathBuf,
    pub data: PathBuf,
}

type Shared = State<Arc<Arena>>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ArenaError> {
    payload.map(|Json(v)| v).map_err(|e| ArenaError::Invalid(e.body_text()))
}

fn session_id(raw: &str) -> Result<Uuid, ArenaError> {
    Uuid::parse_str(raw).map_err(|_| ArenaError::Invalid(format!("`{raw}` is not a session id")))
}

async fn create_session(
    State(arena): Shared,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ArenaError> {
    Ok((StatusCode::CREATED, Json(arena.create(body(payload)?)?)))
}

async fn get_session(State(arena): Shared, Path(id): Path<String>) -> Result<Json<SessionView>, ArenaError> {
    Ok(Json(arena.view(session_id(&id)?)?))
}

async fn post_act(
    State(arena): Shared,
    Path(id): Path<String>,
    payload: Result<Json<ActPayload>, JsonRejection>,
) -> Result<Json<SessionView>, ArenaError> {
    let id = session_id(&id)?;
    Ok(Json(arena.post_act(id, body(payload)?)?))
}

async fn post_selection(
    State(arena): Shared,
    Path(id): Path<String>,
    payload: Result<Json<SelectionRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ArenaError> {
    let id = session_id(&id)?;
    Ok(Json(arena.submit_selection(id, body(payload)?)?))
}

async fn post_survey(
    State(arena): Shared,
    Path(id): Path<String>,
    payload: Result<Json<SurveyAnswers>, JsonRejection>,
) -> Result<Json<SessionView>, ArenaError> {
    let id = session_id(&id)?;
    Ok(Json(arena.record_survey(id, body(payload)?)?))
}

async fn export(State(arena): Shared) -> Result<impl IntoResponse, ArenaError> {
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], arena.export_csv()?))
}

async fn export_summary(State(arena): Shared) -> Json<Vec<ModelSummary>> {
    Json(arena.summary())
}

async fn study_next(State(arena): Shared, Path(token): Path<String>) -> Result<Json<StudyStep>, ArenaError> {
    Ok(Json(arena.study_next(&token)?))
}

async fn models(State(arena): Shared) -> Json<Vec<String>> {
    Json(arena.registry().ids())
}

pub fn router(arena: Arc<Arena>) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/acts", post(post_act))
        .route("/sessions/{id}/selection", post(post_selection))
        .route("/sessions/{id}/survey", post(post_survey))
        .route("/export", get(export))
        .route("/export/summary", get(export_summary))
        .route("/study/{token}/next", get(study_next))
        .with_state(arena)
}

/// Loads the registry, replays stored sessions and serves until the
/// process is stopped.
pub async fn serve(config: ArenaConfig) -> Result<(), ArenaError> {
    let registry = ModelRegistry::load_dir(&config.models)?;
    let arena = Arc::new(Arena::open(registry, &config.data)?);
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    tracing::info!(address = %config.listen, "listening");
    axum::serve(listener, router(arena)).await?;
    Ok(())
}
