//! JSON routes and static bundle serving.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

use crate::session::{SessionFile, SubmittedRanking, TaskInfo, TunerState};
use crate::worker::{Refusal, Shared};

type AppState = Arc<Shared>;

pub fn router(shared: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session))
        .route("/api/candidates", get(candidates))
        .route("/api/ranking", post(ranking))
        .route("/api/trace", get(trace))
        .route("/api/abort", post(abort))
        .with_state(shared);
    match ui_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api.fallback(|| async { error(StatusCode::NOT_FOUND, "no UI bundle configured") }),
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Serialize)]
struct SessionView {
    id: String,
    format_version: u32,
    state: TunerState,
    t: usize,
    #[serde(rename = "T")]
    total: usize,
    m: usize,
    k: usize,
    iterations_done: usize,
    reveal_returns: bool,
    task: TaskInfo,
    history: Vec<SubmittedRanking>,
    error: Option<String>,
}

async fn session(State(shared): State<AppState>) -> Json<SessionView> {
    let inner = shared.lock();
    let file: &SessionFile = &inner.file;
    Json(SessionView {
        id: file.id.clone(),
        format_version: file.format_version,
        state: file.state,
        t: file.t,
        total: file.spec.tuner.t,
        m: file.spec.tuner.m,
        k: file.spec.tuner.k,
        iterations_done: inner.trace.iterations.len(),
        reveal_returns: shared.reveal_returns,
        task: TaskInfo::from(&file.spec.task),
        history: file.history.clone(),
        error: file.error.clone(),
    })
}

async fn candidates(State(shared): State<AppState>) -> Response {
    let inner = shared.lock();
    match (&inner.file.pending, inner.file.state) {
        (Some(set), TunerState::AwaitingRanking) => Json(set.clone()).into_response(),
        _ => error(
            StatusCode::NOT_FOUND,
            format!("no open query (state {:?})", inner.file.state),
        ),
    }
}

/// A bare `[i, j, ...]` or `{"t": 3, "order": [...]}`; with `t` the
/// submission is refused unless that iteration is the open one.
#[derive(Deserialize)]
#[serde(untagged)]
enum RankingBody {
    Order(Vec<usize>),
    Tagged {
        #[serde(default)]
        t: Option<usize>,
        order: Vec<usize>,
    },
}

async fn ranking(State(shared): State<AppState>, body: Bytes) -> Response {
    let (t, order) = match serde_json::from_slice::<RankingBody>(&body) {
        Ok(RankingBody::Order(order)) => (None, order),
        Ok(RankingBody::Tagged { t, order }) => (t, order),
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("expected a list of candidate indices: {e}")),
    };
    match shared.submit(t, order) {
        Ok(t) => Json(json!({ "accepted": t })).into_response(),
        Err(Refusal::Conflict(m)) => error(StatusCode::CONFLICT, m),
        Err(Refusal::Invalid(m)) => error(StatusCode::BAD_REQUEST, m),
    }
}

async fn trace(State(shared): State<AppState>) -> Response {
    let mut trace = shared.lock().trace.clone();
    if !shared.reveal_returns {
        for it in &mut trace.iterations {
            it.values = None;
            it.eval_return = None;
        }
    }
    Json(trace).into_response()
}

async fn abort(State(shared): State<AppState>) -> Response {
    match shared.abort() {
        Ok(()) => {
            let trace = shared.lock().trace.clone();
            if let Err(e) = trace.save(&SessionFile::trace_path(&shared.dir)) {
                return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
            }
            Json(json!({ "state": TunerState::Aborted })).into_response()
        }
        Err(Refusal::Conflict(m) | Refusal::Invalid(m)) => error(StatusCode::CONFLICT, m),
    }
}
