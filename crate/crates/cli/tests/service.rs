//! HTTP and WebSocket behaviour of the service against small in-process models.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use futures_util::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use unmask_cli::service::{load_registry, router, AppState};
use unmask_core::diffusion::DiffusionSchedule;
use unmask_core::mask::MaskPattern;
use unmask_core::nn::DenoiserConfig;
use unmask_core::sampler::{replay, TraceStep};
use unmask_core::synth::melody_corpus;
use unmask_core::tokens::{decode_sequences, encode_sequence, Layout, TokenSequence};
use unmask_core::train::Trainer;

fn write_model(dir: &Path, name: &str, config: DenoiserConfig, timesteps: usize) -> String {
    let path = dir.join(format!("{name}.ckpt"));
    Trainer::new(config, DiffusionSchedule::new(timesteps), 1)
        .unwrap()
        .checkpoint()
        .save(&path)
        .unwrap();
    format!("{name}={}", path.display())
}

/// `tiny`: 256 steps, T = 32. `slow`: desk-sized over 1024 steps, T = 1024.
fn state(dir: &Path) -> Arc<AppState> {
    let tiny = DenoiserConfig {
        token_embed_dim: 8,
        summary_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ..DenoiserConfig::desk(Layout::Melody)
    };
    let slow = DenoiserConfig {
        seq_len: 1024,
        ..DenoiserConfig::desk(Layout::Melody)
    };
    let specs = vec![write_model(dir, "tiny", tiny, 32), write_model(dir, "slow", slow, 1024)];
    open(dir, &specs)
}

fn open(dir: &Path, specs: &[String]) -> Arc<AppState> {
    let models = load_registry(specs).unwrap();
    AppState::open(models, None, &dir.join("data")).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn upload(app: &Router, seq: &TokenSequence) -> String {
    let (status, v) = call(app, "POST", "/pieces", Some(json!({ "tokens": B64.encode(encode_sequence(seq)) }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["ids"][0].as_str().unwrap().to_string()
}

async fn wait_terminal(app: &Router, id: &str) -> Value {
    for _ in 0..2000 {
        let (_, v) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

fn decode(b64: &str) -> TokenSequence {
    decode_sequences(&B64.decode(b64).unwrap()).unwrap().pop().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn empty_infill_mask_completes_without_steps() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let source = melody_corpus(1, 16, 3).pop().unwrap();
    let piece = upload(&app, &source).await;
    let mask: Value = serde_json::from_str(&MaskPattern::none(256, 1).to_json()).unwrap();
    let (status, job) = call(
        &app,
        "POST",
        "/jobs",
        Some(json!({ "kind": "infill", "model": "tiny", "piece": piece, "mask": mask })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{job}");
    assert_eq!(job["total_steps"], 0);
    let done = wait_terminal(&app, job["id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done");
    let out = done["artifacts"][0].as_str().unwrap();
    let (_, p) = call(&app, "GET", &format!("/pieces/{out}"), None).await;
    assert_eq!(decode(p["tokens"].as_str().unwrap()), source);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_replays_to_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app2 = app.clone();
    tokio::spawn(async move { axum::serve(listener, app2).await });

    let (status, job) = call(
        &app,
        "POST",
        "/jobs",
        Some(json!({ "kind": "sample", "model": "tiny", "steps": 32, "seed": 4 })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = job["id"].as_str().unwrap().to_string();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/jobs/{id}/stream"))
        .await
        .unwrap();
    let mut messages = Vec::new();
    while let Some(m) = ws.next().await {
        match m.unwrap() {
            Message::Text(t) => messages.push(serde_json::from_str::<Value>(&t).unwrap()),
            Message::Close(_) => break,
            _ => {}
        }
    }
    assert_eq!(messages.first().unwrap()["type"], "start");
    assert_eq!(messages.last().unwrap()["type"], "done");
    let steps: Vec<TraceStep> = messages[1..messages.len() - 1]
        .iter()
        .map(|m| {
            assert_eq!(m["type"], "step");
            serde_json::from_value(m.clone()).unwrap()
        })
        .collect();
    assert_eq!(steps.len(), 32);
    assert!(steps.iter().enumerate().all(|(i, s)| s.step_index == i));
    assert_eq!(steps.last().unwrap().remaining_masks, 0);
    let init = decode(messages[0]["init"].as_str().unwrap());
    let result = decode(messages.last().unwrap()["tokens"].as_str().unwrap());
    assert_eq!(replay(&init, &steps), result);

    let (_, trace) = call(&app, "GET", &format!("/jobs/{id}/trace"), None).await;
    let stored: Vec<TraceStep> = serde_json::from_value(trace["steps"].clone()).unwrap();
    assert_eq!(stored, steps);

    // a late subscriber sees the same stream
    let (mut late, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/jobs/{id}/stream"))
        .await
        .unwrap();
    let mut count = 0;
    while let Some(Ok(Message::Text(_))) = late.next().await {
        count += 1;
    }
    assert_eq!(count, messages.len());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancel_fails_the_job_and_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let (_, job) = call(&app, "POST", "/jobs", Some(json!({ "kind": "sample", "model": "slow" }))).await;
    let id = job["id"].as_str().unwrap().to_string();
    assert_eq!(job["total_steps"], 1024);
    let (status, _) = call(&app, "POST", &format!("/jobs/{id}/cancel"), None).await;
    assert_eq!(status, StatusCode::OK);
    let done = wait_terminal(&app, &id).await;
    assert_eq!(done["status"], "failed");
    assert_eq!(done["cancelled"], true);
    assert!(done["artifacts"].as_array().unwrap().is_empty());
    let (_, trace) = call(&app, "GET", &format!("/jobs/{id}/trace"), None).await;
    let n = trace["steps"].as_array().unwrap().len();
    assert!((1..1024).contains(&n), "{n} steps recorded");
    assert_eq!(done["completed_steps"], n);
    assert!(trace["result"].is_null());

    let (status, err) = call(&app, "POST", &format!("/jobs/{id}/cancel"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "job_finished");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_requests_return_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let piece = upload(&app, &melody_corpus(1, 16, 3).pop().unwrap()).await;

    let cases = [
        (json!({ "kind": "sample", "model": "nope" }), StatusCode::NOT_FOUND, "unknown_model"),
        (json!({ "kind": "infill", "model": "tiny" }), StatusCode::BAD_REQUEST, "missing_piece"),
        (json!({ "kind": "infill", "model": "tiny", "piece": piece }), StatusCode::BAD_REQUEST, "missing_mask"),
        (
            json!({ "kind": "infill", "model": "slow", "piece": piece,
                    "mask": serde_json::from_str::<Value>(&MaskPattern::all(1024, 1).to_json()).unwrap() }),
            StatusCode::BAD_REQUEST,
            "shape_mismatch",
        ),
        (json!({ "kind": "accompany", "model": "tiny", "piece": piece, "tracks": [0] }), StatusCode::BAD_REQUEST, "bad_tracks"),
        (json!({ "kind": "guide", "model": "tiny", "guidance": { "density": [4.0], "scale": 1.0 } }), StatusCode::BAD_REQUEST, "no_classifier"),
        (json!({ "kind": "sample", "model": "tiny", "steps": 0 }), StatusCode::BAD_REQUEST, "bad_steps"),
    ];
    for (body, status, code) in cases {
        let (got, v) = call(&app, "POST", "/jobs", Some(body.clone())).await;
        assert_eq!(got, status, "{body} -> {v}");
        assert_eq!(v["error"]["code"], code, "{body}");
        assert!(v["error"]["message"].is_string());
    }
    let (status, v) = call(&app, "GET", "/pieces/p999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"]["code"].is_string());
    let (status, _) = call(&app, "POST", "/pieces", Some(json!({ "tokens": "!!" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_restores_pieces_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (piece, job) = {
        let app = router(state(dir.path()));
        let piece = upload(&app, &melody_corpus(1, 16, 8).pop().unwrap()).await;
        let (_, job) = call(&app, "POST", "/jobs", Some(json!({ "kind": "sample", "model": "tiny", "steps": 8 }))).await;
        let id = job["id"].as_str().unwrap().to_string();
        wait_terminal(&app, &id).await;
        (piece, id)
    };
    let specs: Vec<String> = ["tiny", "slow"]
        .iter()
        .map(|n| format!("{n}={}", dir.path().join(format!("{n}.ckpt")).display()))
        .collect();
    let app = router(open(dir.path(), &specs));
    let (status, _) = call(&app, "GET", &format!("/pieces/{piece}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, j) = call(&app, "GET", &format!("/jobs/{job}"), None).await;
    assert_eq!(j["status"], "done");
    let (status, _) = call(&app, "GET", &format!("/jobs/{job}/trace"), None).await;
    assert_eq!(status, StatusCode::GONE);
    // fresh ids do not collide with restored ones
    let (_, next) = call(&app, "POST", "/jobs", Some(json!({ "kind": "sample", "model": "tiny", "steps": 2 }))).await;
    assert_ne!(next["id"].as_str().unwrap(), job);
}
