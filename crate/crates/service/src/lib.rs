//! HTTP front end for live runs: create, inspect, stream events, edit a
//! paused step and cancel. Each run is worked on its own thread and logged
//! to `<data_dir>/<run_id>.jsonl`; logs are replayed on startup.

mod registry;

use std::convert::Infallible;
use std::future::Future;
use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use stepforge_core::refine::{AgentError, EditOutcome};
use stepforge_core::run::InterventionRequest;
use stepforge_core::{AgentConfig, Deps, HumanEdit, RunMode, RunState, RunStatus, TaskSpec};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub use registry::{valid_run_id, Registry};
use registry::{Command, CreateError, RunHandle};

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            path: None,
        }
    }

    fn not_found(run_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no run `{run_id}`"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::NotRunning(_) | AgentError::NotPaused | AgentError::StepMismatch { .. } => {
                ApiError::conflict(e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "invalid_request",
            message: e.into_inner().to_string(),
            path: (path != ".").then_some(path),
        }
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    pub task: TaskSpec,
    #[serde(default)]
    pub cfg: AgentConfig,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub run_id: Option<String>,
}

fn default_mode() -> RunMode {
    RunMode::Human
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub edited_code: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct StepView {
    pub index: usize,
    pub instruction: String,
    pub origin: stepforge_core::model::StepOrigin,
    pub attempts_used: u32,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub task_id: String,
    pub status: RunStatus,
    pub mode: RunMode,
    pub current_step: usize,
    pub completed_steps: usize,
    pub total_steps: usize,
    pub complete_rate: f64,
    pub steps: Vec<StepView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pending: Option<InterventionRequest>,
    pub program: String,
    pub next_seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

impl RunSummary {
    pub fn of(state: &RunState) -> Self {
        let program = state.program();
        Self {
            run_id: state.run_id.clone(),
            task_id: state.task.id.clone(),
            status: state.status,
            mode: state.mode,
            current_step: state.current_step,
            completed_steps: state.completed_steps,
            total_steps: state.total_steps(),
            complete_rate: program.complete_rate(),
            steps: state
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| StepView {
                    index: i,
                    instruction: s.spec.instruction.clone(),
                    origin: s.origin,
                    attempts_used: s.attempts_used,
                })
                .collect(),
            pending: state.pending.clone(),
            program: program.source(),
            next_seq: state.next_seq,
            finish_reason: state.finish_reason.clone(),
        }
    }
}

type AppState = Arc<Registry>;

fn handle(app: &Registry, run_id: &str) -> Result<Arc<RunHandle>, ApiError> {
    app.get(run_id).ok_or_else(|| ApiError::not_found(run_id))
}

fn summary(h: &RunHandle) -> Result<RunSummary, ApiError> {
    let inner = h.shared.lock();
    let state = inner.state.as_ref().ok_or_else(|| ApiError::internal("run has no state"))?;
    Ok(RunSummary::of(state))
}

async fn create_run(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRun = parse_body(&body)?;
    let run_id = match req.run_id {
        Some(id) if !valid_run_id(&id) => {
            let mut e = ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                "run_id may only contain letters, digits, '-' and '_'",
            );
            e.path = Some("run_id".into());
            return Err(e);
        }
        Some(id) => id,
        None => app.next_run_id(),
    };
    let reg = app.clone();
    let created = tokio::task::spawn_blocking(move || reg.create(run_id, req.task, req.cfg, req.mode))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let h = match created {
        Ok(h) => h,
        Err(CreateError::Duplicate(id)) => return Err(ApiError::conflict(format!("run `{id}` already exists"))),
        Err(CreateError::Agent(AgentError::Model(e))) => {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_task", e.to_string()))
        }
        Err(CreateError::Agent(e)) => return Err(e.into()),
        Err(CreateError::Io(e)) => return Err(ApiError::internal(e.to_string())),
    };
    Ok((StatusCode::CREATED, Json(summary(&h)?)))
}

async fn list_runs(State(app): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "runs": app.ids() }))
}

async fn get_run(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<RunSummary>, ApiError> {
    let h = handle(&app, &id)?;
    Ok(Json(summary(&h)?))
}

async fn get_tree(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let h = handle(&app, &id)?;
    let dump = {
        let inner = h.shared.lock();
        inner.state.as_ref().map(|s| s.tree.dump()).unwrap_or_default()
    };
    Ok(([(header::CONTENT_TYPE, "application/json")], dump).into_response())
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub from: u64,
    /// Keep the stream open for new events until the run ends.
    #[serde(default = "yes")]
    pub follow: bool,
}

fn yes() -> bool {
    true
}

async fn get_events(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Response, ApiError> {
    let h = handle(&app, &id)?;
    let rx = h.shared.subscribe();
    let start = q.from as usize;
    let stream = futures_util::stream::unfold((h, rx, start, q.follow), |(h, mut rx, next, follow)| async move {
        loop {
            let (line, done) = {
                let inner = h.shared.lock();
                let done = inner.state.as_ref().is_none_or(|s| s.status.is_final()) || !follow;
                (inner.events.get(next).map(|e| e.to_line()), done)
            };
            if let Some(line) = line {
                return Some((Ok::<_, Infallible>(line), (h, rx, next + 1, follow)));
            }
            if done || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

async fn post_edit(
    State(app): State<AppState>,
    UrlPath((id, step)): UrlPath<(String, usize)>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: EditBody = parse_body(&body)?;
    let h = handle(&app, &id)?;
    {
        let inner = h.shared.lock();
        let state = inner.state.as_ref().ok_or_else(|| ApiError::internal("run has no state"))?;
        match &state.pending {
            Some(p) if state.status == RunStatus::Paused && p.step_index == step => {}
            Some(p) if state.status == RunStatus::Paused => {
                return Err(ApiError::conflict(format!(
                    "step {} is awaiting intervention, not step {step}",
                    p.step_index
                )))
            }
            _ => return Err(ApiError::conflict(format!("run is {:?}, no intervention pending", state.status))),
        }
    }
    let (tx, rx) = oneshot::channel();
    let edit = HumanEdit {
        step_index: step,
        edited_code: req.edited_code,
        note: req.note,
    };
    if !h.send(Command::Edit(edit, tx)) {
        return Err(ApiError::conflict("run is no longer accepting edits"));
    }
    let outcome = rx.await.map_err(|_| ApiError::internal("run worker stopped"))??;
    let body = match outcome {
        EditOutcome::Accepted { node } => json!({ "outcome": "accepted", "node": node }),
        EditOutcome::Rejected { outcome } => json!({ "outcome": "rejected", "execution": outcome }),
    };
    Ok((StatusCode::OK, Json(body)).into_response())
}

async fn post_cancel(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let h = handle(&app, &id)?;
    match h.status() {
        Some(s) if s.is_final() => Err(ApiError::conflict(format!("run is already {s:?}"))),
        Some(RunStatus::Paused) => {
            let (tx, rx) = oneshot::channel();
            if !h.send(Command::Cancel(tx)) {
                return Err(ApiError::conflict("run is no longer accepting commands"));
            }
            rx.await.map_err(|_| ApiError::internal("run worker stopped"))??;
            Ok((StatusCode::OK, Json(summary(&h)?)).into_response())
        }
        _ => {
            h.request_cancel();
            Ok((StatusCode::ACCEPTED, Json(summary(&h)?)).into_response())
        }
    }
}

pub fn router(app: Arc<Registry>) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/tree", get(get_tree))
        .route("/runs/{id}/events", get(get_events))
        .route("/runs/{id}/interventions/{step}/edit", post(post_edit))
        .route("/runs/{id}/cancel", post(post_cancel))
        .with_state(app)
}

/// Opens (and recovers) the run directory; blocking.
pub fn open_registry(data_dir: &Path, deps: Arc<Deps>) -> std::io::Result<Arc<Registry>> {
    Ok(Arc::new(Registry::open(data_dir, deps)?))
}

pub async fn serve(
    listener: TcpListener,
    app: Arc<Registry>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
