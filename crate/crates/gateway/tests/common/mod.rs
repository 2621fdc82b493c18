#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use intentdial_core::encoder::Vocabulary;
use intentdial_core::graph::{synthesize_graph, GeneratorSpec};
use intentdial_core::manager::{Engine, ManagerConfig, TemplateSet};
use intentdial_core::model::{Model, ModelConfig};
use intentdial_gateway::{router, AppState, EngineSnapshot, SnapshotPaths};

/// Untrained engine over a small synthetic graph. A large `k` makes
/// query-terminal choices near certain.
pub fn engine(k: usize) -> Engine {
    let graph = synthesize_graph(&GeneratorSpec::new(3, 3, 8, 1), 11).unwrap();
    let vocab = Vocabulary::from_tokens(["alpha0", "alpha1", "beta0", "beta1", "gamma0", "hello", "yes", "no"]);
    let model = Model::new(&graph, vocab.len(), ModelConfig::default(), 5).unwrap();
    Engine {
        graph,
        model,
        vocab,
        templates: TemplateSet::english(),
        config: ManagerConfig {
            k,
            seed: 9,
            ..ManagerConfig::default()
        },
    }
}

pub fn snapshot_dir(dir: &Path, k: usize) -> SnapshotPaths {
    EngineSnapshot::persist(&engine(k), dir).unwrap()
}

pub fn app(paths: &SnapshotPaths) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(EngineSnapshot::load(paths).unwrap()));
    (router(state.clone(), None), state)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| serde_json::Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn new_session(app: &Router) -> String {
    let (status, v) = call(app, "POST", "/api/session", None).await;
    assert!(status.is_success(), "{status}");
    v["session_id"].as_str().unwrap().to_string()
}

pub async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, serde_json::Value) {
    let body = serde_json::json!({ "text": text }).to_string();
    call(app, "POST", &format!("/api/session/{id}/message"), Some(&body)).await
}
