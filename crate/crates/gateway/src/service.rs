//! HTTP API over sessions, traces and the served graph.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use intentdial_core::graph::IntentGraph;
use intentdial_core::manager::{Exchange, ManagerError, Phase, Session};
use intentdial_core::trace::PathTrace;

use crate::snapshot::EngineSnapshot;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type SessionSlot = Arc<tokio::sync::Mutex<Session>>;

/// Shared service state: the published snapshot and the live sessions.
pub struct AppState {
    snapshot: RwLock<Arc<EngineSnapshot>>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    next_id: AtomicU64,
    transcript: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(snapshot: EngineSnapshot) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            transcript: None,
        }
    }

    /// Appends one JSON line per message exchange to `path`.
    pub fn with_transcript(mut self, path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.transcript = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn snapshot(&self) -> Arc<EngineSnapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Publishes `next`; requests already running keep the snapshot they
    /// started with.
    pub fn swap(&self, next: EngineSnapshot) -> Arc<EngineSnapshot> {
        let mut guard = self.snapshot.write().expect("snapshot lock");
        std::mem::replace(&mut *guard, Arc::new(next))
    }

    /// The session's turn lock; holding it makes new turns answer 409.
    pub fn session(&self, id: &str) -> Option<SessionSlot> {
        self.sessions.lock().expect("session map").get(id).cloned()
    }

    fn log(&self, entry: &serde_json::Value) {
        if let Some(f) = &self.transcript {
            let mut f = f.lock().expect("transcript lock");
            // A failed log write does not fail the turn.
            let _ = writeln!(f, "{entry}");
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub session_id: String,
    pub turn: usize,
    pub response: String,
    pub template: String,
    pub phase: Phase,
    pub trace: PathTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracesResponse {
    pub session_id: String,
    pub phase: Phase,
    pub history: Vec<Exchange>,
    pub traces: Vec<PathTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_kind: Option<String>,
    pub is_key: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub relation: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphQuery {
    pub id: String,
    pub text: String,
    pub key_nodes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub root: String,
    pub start_kind: String,
    pub kind_order: Vec<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub queries: Vec<GraphQuery>,
}

impl GraphExport {
    pub fn of(g: &IntentGraph) -> Self {
        let key = |e| g.entity_key(e).to_string();
        Self {
            root: key(g.root()),
            start_kind: g.start_kind().to_string(),
            kind_order: g.kind_order().to_vec(),
            nodes: g
                .entities()
                .map(|e| {
                    let k = g.kind(e);
                    GraphNode {
                        id: key(e),
                        kind: k.label().to_string(),
                        feature_kind: k.feature_kind().map(str::to_string),
                        is_key: k.is_key(),
                    }
                })
                .collect(),
            edges: g
                .triples()
                .iter()
                .map(|t| GraphEdge {
                    source: key(t.subject),
                    relation: g.relation_key(t.relation).to_string(),
                    target: key(t.object),
                })
                .collect(),
            queries: g
                .queries()
                .map(|(q, m)| GraphQuery {
                    id: key(q),
                    text: m.text.clone(),
                    key_nodes: m.key_nodes.iter().map(|e| key(*e)).collect(),
                })
                .collect(),
        }
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let slot = Arc::new(tokio::sync::Mutex::new(Session::new(id.clone())));
    state.sessions.lock().expect("session map").insert(id.clone(), slot);
    (StatusCode::CREATED, Json(json!({ "session_id": id })))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ApiError> {
    let slot = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let req: MessageRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty text"));
    }
    let mut session = slot
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "a turn is already in flight for this session"))?;
    if !session.phase.is_open() {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} is {}", session.phase.label())));
    }
    let snapshot = state.snapshot();
    let text = req.text.clone();
    let out = tokio::task::spawn_blocking(move || {
        let out = session.handle(&snapshot.engine, &text);
        (session.turns(), out)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (turns, out) = out;
    let out = out.map_err(|e| match e {
        ManagerError::EmptyUtterance => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
        ManagerError::SessionClosed => ApiError::new(StatusCode::CONFLICT, e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    let resp = MessageResponse {
        session_id: id,
        turn: turns - 1,
        response: out.response,
        template: out.template.as_str().to_string(),
        phase: out.phase,
        trace: out.trace,
    };
    state.log(&json!({
        "session_id": resp.session_id,
        "turn": resp.turn,
        "user": req.text,
        "response": resp.response,
        "template": resp.template,
        "terminal": resp.trace.terminal(),
        "phase": resp.phase,
    }));
    Ok(Json(resp))
}

async fn get_traces(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TracesResponse>, ApiError> {
    let slot = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let s = slot
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "a turn is in flight for this session"))?;
    Ok(Json(TracesResponse {
        session_id: id,
        phase: s.phase.clone(),
        history: s.history.clone(),
        traces: s.traces.clone(),
    }))
}

async fn get_graph(State(state): State<Arc<AppState>>) -> Json<GraphExport> {
    Json(GraphExport::of(&state.snapshot().engine.graph))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": VERSION, "digest": state.snapshot().digest }))
}

/// API routes, plus static files from `static_dir` for every other path.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/message", post(post_message))
        .route("/api/session/{id}/traces", get(get_traces))
        .route("/api/graph", get(get_graph))
        .route("/api/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}
