//! HTTP API used by the review console.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /runs` | create a run and start driving it |
//! | `GET /runs` | list runs |
//! | `GET /runs/{id}` | run view |
//! | `POST /runs/{id}/approval` | answer the open gate |
//! | `GET /runs/{id}/events?after=<seq>&wait_ms=<ms>` | long-poll the event log |
//! | `GET /runs/{id}/artifacts/{path}` | PNG and JSON artifacts |
//! | `POST /runs/{id}/evaluate` | compute metrics |

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use visagent_core::story::Story;

use crate::artifacts::safe_relative;
use crate::config::RunConfig;
use crate::orchestrator::{ApprovalEvent, Orchestrator, OrchestratorError, SequencedEvent};

/// Longest accepted long-poll wait.
pub const MAX_WAIT_MS: u64 = 30_000;
const POLL_INTERVAL: Duration = Duration::from_millis(50);

pub struct ApiError(OrchestratorError);

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match &self.0 {
            OrchestratorError::Config(_) => StatusCode::BAD_REQUEST,
            OrchestratorError::UnknownRun(_) => StatusCode::NOT_FOUND,
            OrchestratorError::GateClosed { .. } | OrchestratorError::NotReady(..) => StatusCode::CONFLICT,
            OrchestratorError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            OrchestratorError::StoreCorrupt(_) | OrchestratorError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match &self.0 {
            OrchestratorError::Config(_) => "config_error",
            OrchestratorError::UnknownRun(_) => "unknown_run",
            OrchestratorError::GateClosed { .. } => "gate_closed",
            OrchestratorError::NotReady(..) => "not_ready",
            OrchestratorError::Rejected(_) => "rejected",
            OrchestratorError::StoreCorrupt(_) => "store_corrupt",
            OrchestratorError::Io(_) => "io_error",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({"error": self.kind(), "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(OrchestratorError::Config(crate::config::ConfigError::new(msg)))
}

#[derive(Clone)]
pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
}

/// Drives a run in the background until it rests.
pub fn spawn_worker(orchestrator: Arc<Orchestrator>, run_id: String) {
    tokio::task::spawn_blocking(move || {
        if let Err(e) = orchestrator.run_to_rest(&run_id) {
            eprintln!("run {run_id}: {e}");
        }
    });
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, OrchestratorError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(OrchestratorError::Io(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StoryInput {
    Text(String),
    Full { text: String, #[serde(default)] title: Option<String> },
}

#[derive(Debug, Deserialize)]
pub struct CreateRun {
    pub story: StoryInput,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub config: Option<RunConfig>,
}

async fn create_run(State(s): State<AppState>, Json(body): Json<CreateRun>) -> ApiResult<impl IntoResponse> {
    let (text, inner_title) = match body.story {
        StoryInput::Text(t) => (t, None),
        StoryInput::Full { text, title } => (text, title),
    };
    let mut story = Story::new(text).map_err(|e| bad_request(e.to_string()))?;
    story.title = body.title.or(inner_title);
    let config = body.config.unwrap_or_default();
    let orch = s.orchestrator.clone();
    let run = blocking(move || orch.create_run(story, config)).await?;
    spawn_worker(s.orchestrator.clone(), run.run_id.clone());
    Ok((StatusCode::CREATED, Json(crate::orchestrator::RunView::of(&run))))
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.orchestrator.list()?))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.orchestrator.get_state(&id)?))
}

async fn approve(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(mut body): Json<Value>,
) -> ApiResult<impl IntoResponse> {
    let obj = body.as_object_mut().ok_or_else(|| bad_request("approval must be a JSON object"))?;
    match obj.get("run_id") {
        None => {
            obj.insert("run_id".into(), Value::String(id.clone()));
        }
        Some(v) if v.as_str() == Some(id.as_str()) => {}
        Some(_) => return Err(ApiError(OrchestratorError::Rejected("run_id differs from the URL".into()))),
    }
    let event: ApprovalEvent =
        serde_json::from_value(body).map_err(|e| ApiError(OrchestratorError::Rejected(e.to_string())))?;
    let orch = s.orchestrator.clone();
    let run = blocking(move || orch.submit_approval(event)).await?;
    spawn_worker(s.orchestrator.clone(), id);
    Ok(Json(crate::orchestrator::RunView::of(&run)))
}

#[derive(Debug, Deserialize)]
pub struct EventQuery {
    #[serde(default)]
    pub after: u64,
    #[serde(default)]
    pub wait_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventPage {
    pub events: Vec<SequencedEvent>,
    /// Pass as `after` to get the following events.
    pub last_seq: u64,
}

async fn events(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
) -> ApiResult<impl IntoResponse> {
    let deadline = Instant::now() + Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    loop {
        let events = s.orchestrator.events(&id, q.after)?;
        if !events.is_empty() || Instant::now() >= deadline {
            let last_seq = events.last().map_or(q.after, |e| e.seq);
            return Ok(Json(EventPage { events, last_seq }));
        }
        tokio::time::sleep(POLL_INTERVAL).await;
    }
}

async fn artifact(State(s): State<AppState>, Path((id, path)): Path<(String, String)>) -> ApiResult<Response> {
    let store = s.orchestrator.store();
    if !store.exists(&id) {
        return Err(OrchestratorError::UnknownRun(id).into());
    }
    let not_found = || (StatusCode::NOT_FOUND, Json(json!({"error": "not_found", "message": "no such artifact"})));
    let Ok(rel) = safe_relative(&path) else { return Ok(not_found().into_response()) };
    let content_type = match rel.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => return Ok(not_found().into_response()),
    };
    match tokio::fs::read(store.run_dir(&id).join(rel)).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response()),
        Err(_) => Ok(not_found().into_response()),
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct EvaluateBody {
    #[serde(default)]
    pub prompts: Option<Vec<String>>,
}

async fn evaluate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<EvaluateBody>>,
) -> ApiResult<impl IntoResponse> {
    let prompts = body.and_then(|b| b.0.prompts);
    let orch = s.orchestrator.clone();
    Ok(Json(blocking(move || orch.evaluate(&id, prompts)).await?))
}

pub fn router(orchestrator: Arc<Orchestrator>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/approval", post(approve))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/artifacts/{*path}", get(artifact))
        .route("/runs/{id}/evaluate", post(evaluate))
        .with_state(AppState { orchestrator });
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves the API until the process stops, first resuming every run that
/// can proceed on its own.
pub async fn serve(orchestrator: Arc<Orchestrator>, port: u16, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    for id in orchestrator.resumable()? {
        spawn_worker(orchestrator.clone(), id);
    }
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(orchestrator, ui_dir)).await?;
    Ok(())
}
