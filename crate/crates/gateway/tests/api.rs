mod common;

use axum::http::StatusCode;
use common::{app, call, new_session, say, snapshot_dir};
use intentdial_core::trace::PathTrace;
use intentdial_gateway::{router, AppState, EngineSnapshot};
use proptest::prelude::*;
use std::sync::Arc;

#[tokio::test]
async fn health_reports_version_and_digest() {
    let dir = tempfile::tempdir().unwrap();
    let paths = snapshot_dir(dir.path(), 20);
    let (app, state) = app(&paths);
    let (status, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["version"], intentdial_gateway::VERSION);
    assert_eq!(v["digest"], state.snapshot().digest);
}

#[tokio::test]
async fn session_ids_are_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(&snapshot_dir(dir.path(), 20));
    assert_eq!(new_session(&app).await, "s1");
    assert_eq!(new_session(&app).await, "s2");
}

#[tokio::test]
async fn message_returns_a_valid_rooted_trace() {
    let dir = tempfile::tempdir().unwrap();
    let paths = snapshot_dir(dir.path(), 20);
    let (app, state) = app(&paths);
    let id = new_session(&app).await;
    let (status, v) = say(&app, &id, "alpha0 beta1").await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(!v["response"].as_str().unwrap().is_empty());
    let trace: PathTrace = serde_json::from_value(v["trace"].clone()).unwrap();
    let g = &state.snapshot().engine.graph;
    trace.validate(g).unwrap();
    assert_eq!(trace.nodes[0].id, g.entity_key(g.root()));
    assert!(v["phase"]["state"].is_string());
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(&snapshot_dir(dir.path(), 20));
    let id = new_session(&app).await;
    let (status, _) = say(&app, "s999", "hello").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/session/s999/traces", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = say(&app, &id, "   ").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = say(&app, &id, "?!").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let uri = format!("/api/session/{id}/message");
    let (status, v) = call(&app, "POST", &uri, Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let (status, _) = call(&app, "POST", &uri, Some("{\"txt\": \"hi\"}")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // A held turn lock stands in for an in-flight request.
    let slot = state.session(&id).unwrap();
    let guard = slot.lock().await;
    let (status, _) = say(&app, &id, "hello").await;
    assert_eq!(status, StatusCode::CONFLICT);
    drop(guard);
    let (status, _) = say(&app, &id, "hello").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn handed_off_session_rejects_turns() {
    let dir = tempfile::tempdir().unwrap();
    // With 500 samples an untrained policy almost surely reaches a query.
    let (app, _) = app(&snapshot_dir(dir.path(), 500));
    let id = new_session(&app).await;
    let (_, v) = say(&app, &id, "alpha0 beta0 gamma0").await;
    assert_eq!(v["template"], "confirm_query", "{v}");
    assert_eq!(v["phase"]["state"], "awaiting_confirmation");
    let (status, v) = say(&app, &id, "yes please").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["template"], "handoff");
    assert_eq!(v["phase"]["state"], "handed_off");
    let (status, _) = say(&app, &id, "hello").await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, v) = call(&app, "GET", &format!("/api/session/{id}/traces"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["traces"].as_array().unwrap().len(), 2);
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn graph_export_matches_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(&snapshot_dir(dir.path(), 20));
    let (status, v) = call(&app, "GET", "/api/graph", None).await;
    assert_eq!(status, StatusCode::OK);
    let g = &state.snapshot().engine.graph;
    assert_eq!(v["nodes"].as_array().unwrap().len(), g.len());
    assert_eq!(v["edges"].as_array().unwrap().len(), g.triples().len());
    assert_eq!(v["queries"].as_array().unwrap().len(), g.num_queries());
    let keys = v["nodes"].as_array().unwrap().iter().filter(|n| n["is_key"] == true).count();
    assert_eq!(keys, g.entities().filter(|e| g.kind(*e).is_key()).count());
}

#[tokio::test]
async fn swap_publishes_a_new_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(&snapshot_dir(dir.path(), 20));
    let other = tempfile::tempdir().unwrap();
    let other_paths = snapshot_dir(other.path(), 7);
    let next = EngineSnapshot::load(&other_paths).unwrap();
    let digest = next.digest.clone();
    let old = state.swap(next);
    assert_ne!(old.digest, digest);
    let (_, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(v["digest"], digest);
}

#[tokio::test]
async fn static_files_and_transcript_log() {
    let dir = tempfile::tempdir().unwrap();
    let paths = snapshot_dir(dir.path(), 20);
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<html>console</html>").unwrap();
    let log = dir.path().join("transcript.jsonl");
    let state = AppState::new(EngineSnapshot::load(&paths).unwrap()).with_transcript(&log).unwrap();
    let app = router(Arc::new(state), Some(web.path().to_path_buf()));
    let (status, v) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, "<html>console</html>");
    let id = new_session(&app).await;
    say(&app, &id, "alpha1").await;
    say(&app, &id, "beta0").await;
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["user"], "beta0");
    assert_eq!(lines[1]["turn"], 1);
}

async fn transcript(app: &axum::Router, script: &[&str]) -> Vec<serde_json::Value> {
    let id = new_session(app).await;
    let mut out = Vec::new();
    for line in script {
        let (status, v) = say(app, &id, line).await;
        out.push(serde_json::json!({ "status": status.as_u16(), "body": v }));
    }
    out
}

#[tokio::test]
async fn restart_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let paths = snapshot_dir(dir.path(), 30);
    let script = ["alpha0", "beta1 hello", "no", "gamma0", "yes"];
    let (first, _) = app(&paths);
    let a = transcript(&first, &script).await;
    drop(first);
    let (second, _) = app(&paths);
    let b = transcript(&second, &script).await;
    assert_eq!(a, b);
}

fn run_interleaved(paths: &intentdial_gateway::SnapshotPaths, scripts: &[Vec<String>], order: &[usize]) -> Vec<Vec<String>> {
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let (app, _) = app(paths);
        let mut ids = Vec::new();
        for _ in scripts {
            ids.push(new_session(&app).await);
        }
        let mut cursor = vec![0; scripts.len()];
        let mut out = vec![Vec::new(); scripts.len()];
        let mut pending = Vec::new();
        for &s in order {
            if cursor[s] < scripts[s].len() {
                pending.push((s, scripts[s][cursor[s]].clone()));
                cursor[s] += 1;
            }
            // Requests of distinct sessions run concurrently.
            if pending.len() == scripts.len() || pending.iter().filter(|(x, _)| *x == s).count() > 1 {
                flush(&app, &ids, &mut pending, &mut out).await;
            }
        }
        flush(&app, &ids, &mut pending, &mut out).await;
        for (s, script) in scripts.iter().enumerate() {
            for line in &script[cursor[s]..] {
                let (status, v) = say(&app, &ids[s], line).await;
                out[s].push(format!("{status} {v}"));
            }
        }
        out
    })
}

async fn flush(app: &axum::Router, ids: &[String], pending: &mut Vec<(usize, String)>, out: &mut [Vec<String>]) {
    let mut seen = std::collections::BTreeSet::new();
    let (now, later): (Vec<_>, Vec<_>) = pending.drain(..).partition(|(s, _)| seen.insert(*s));
    let handles: Vec<_> = now
        .iter()
        .map(|(s, line)| {
            let app = app.clone();
            let id = ids[*s].clone();
            let line = line.clone();
            tokio::spawn(async move { say(&app, &id, &line).await })
        })
        .collect();
    for ((s, _), h) in now.iter().zip(handles) {
        let (status, v) = h.await.unwrap();
        out[*s].push(format!("{status} {v}"));
    }
    *pending = later;
    if !pending.is_empty() {
        Box::pin(flush(app, ids, pending, out)).await;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn concurrent_sessions_match_serial_runs(
        scripts in prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["alpha0", "beta1", "gamma0 alpha1", "yes", "no", "hello"]), 1..5),
            2..4,
        ),
        order in prop::collection::vec(0usize..4, 0..16),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let paths = snapshot_dir(dir.path(), 10);
        let scripts: Vec<Vec<String>> = scripts.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect();
        let order: Vec<usize> = order.into_iter().map(|o| o % scripts.len()).collect();
        let serial_order: Vec<usize> = (0..scripts.len()).flat_map(|s| std::iter::repeat_n(s, scripts[s].len())).collect();
        let serial = run_interleaved(&paths, &scripts, &serial_order);
        let mixed = run_interleaved(&paths, &scripts, &order);
        prop_assert_eq!(serial, mixed);
    }
}
