//! HTTP API.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::planner::TrialSource;
use crate::scoring::{age_shift_columns, score, Column};
use crate::store::{Ack, SessionStore, SessionSummary};
use crate::{SessionKind, Tally, VttError, VttSessionSpec};

pub struct AppState {
    pub store: SessionStore,
    pub source: Box<dyn TrialSource>,
}

impl AppState {
    pub fn new(store: SessionStore, source: impl TrialSource + 'static) -> Arc<Self> {
        Arc::new(Self {
            store,
            source: Box::new(source),
        })
    }
}

impl IntoResponse for VttError {
    fn into_response(self) -> Response {
        let status = match &self {
            VttError::NotFound(_) => StatusCode::NOT_FOUND,
            VttError::Conflict(_) | VttError::Empty(_) => StatusCode::CONFLICT,
            VttError::BadRequest(_) => StatusCode::BAD_REQUEST,
            VttError::Shortfall(_) => StatusCode::UNPROCESSABLE_ENTITY,
            VttError::Model(_) | VttError::Storage { .. } | VttError::CorruptLog { .. } => {
                log::error!("{self}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, VttError>;

/// Run store and model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| VttError::Storage {
            path: Default::default(),
            source: std::io::Error::other(e.to_string()),
        })?
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    n_trials: usize,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Result<Json<VttSessionSpec>, axum::extract::rejection::JsonRejection>) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(spec) = body.map_err(|e| VttError::BadRequest(e.body_text()))?;
    spec.validate()?;
    let (session_id, n_trials) = blocking(move || {
        let planned = app.source.plan(&spec)?;
        app.store.create(&spec, planned)
    })
    .await?;
    log::info!("created session {session_id} with {n_trials} trials");
    Ok((StatusCode::CREATED, Json(Created { session_id, n_trials })))
}

async fn next_trial(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(match app.store.next(&id)? {
        Some((trial_id, token)) => json!({ "trial_id": trial_id, "image_url": format!("/images/{token}") }),
        None => json!({ "done": true, "report_url": format!("/sessions/{id}/report") }),
    }))
}

#[derive(Deserialize)]
struct ResponseBody {
    trial_id: String,
    answer: String,
}

async fn submit_response(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ResponseBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(body) = body.map_err(|e| VttError::BadRequest(e.body_text()))?;
    let trial_id = body.trial_id.clone();
    let ack = blocking(move || app.store.respond(&id, &body.trial_id, &body.answer)).await?;
    let status = match ack {
        Ack::Recorded => "recorded",
        Ack::Duplicate => "duplicate",
    };
    Ok(Json(json!({ "trial_id": trial_id, "status": status })))
}

#[derive(Deserialize, Default)]
struct ReportQuery {
    #[serde(default)]
    partial: bool,
    /// Session of the opposite shift direction, for the combined table.
    pair: Option<String>,
}

#[derive(Serialize)]
struct SessionReport {
    session_id: String,
    kind: SessionKind,
    model_tag: crate::ModelTag,
    dataset_tag: String,
    partial: bool,
    answered: usize,
    n_trials: usize,
    columns: Vec<Column>,
    counts: Tally,
}

#[derive(Serialize)]
struct AgeShiftReport {
    kind: &'static str,
    progression_session: String,
    regression_session: String,
    partial: bool,
    columns: Vec<Column>,
}

fn checked_summary(app: &AppState, id: &str, partial: bool) -> ApiResult<SessionSummary> {
    let s = app.store.summary(id)?;
    if !s.complete() && !partial {
        return Err(VttError::Conflict(format!(
            "session {id} has {} of {} trials answered; request partial=true for an interim report",
            s.answered, s.n_trials
        )));
    }
    Ok(s)
}

async fn report(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let s = checked_summary(&app, &id, q.partial)?;
    let scored = score(s.spec.kind, s.tally)?;
    let Some(other) = q.pair else {
        return Ok(Json(SessionReport {
            session_id: id,
            kind: s.spec.kind,
            model_tag: s.spec.model_tag,
            dataset_tag: s.spec.dataset_tag.clone(),
            partial: !s.complete(),
            answered: s.answered,
            n_trials: s.n_trials,
            columns: scored.columns(),
            counts: s.tally,
        })
        .into_response());
    };
    let t = checked_summary(&app, &other, q.partial)?;
    let other_scored = score(t.spec.kind, t.tally)?;
    let ((p_id, p), (r_id, r)) = if s.spec.kind == SessionKind::Progression {
        ((id, scored), (other, other_scored))
    } else {
        ((other, other_scored), (id, scored))
    };
    Ok(Json(AgeShiftReport {
        kind: "age_shift",
        columns: age_shift_columns(&p, &r)?,
        progression_session: p_id,
        regression_session: r_id,
        partial: !s.complete() || !t.complete(),
    })
    .into_response())
}

async fn image(State(app): State<Arc<AppState>>, Path(token): Path<String>) -> ApiResult<Response> {
    let path = app.store.image_path(&token)?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| VttError::storage(&path, e))?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")],
        bytes,
    )
        .into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_trial))
        .route("/sessions/{id}/responses", post(submit_response))
        .route("/sessions/{id}/report", get(report))
        .route("/images/{token}", get(image))
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("visual Turing test service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
