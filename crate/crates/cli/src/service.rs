//! HTTP+JSON service. Sampling jobs run on the blocking pool and publish one
//! stream message per reverse step.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use unmask_core::extract::{export_midi, ingest_bytes};
use unmask_core::guidance::{DensityClassifier, DensityGuidance};
use unmask_core::mask::MaskPattern;
use unmask_core::metrics::evaluate;
use unmask_core::nn::Model;
use unmask_core::sampler::{self, SampleError};
use unmask_core::tokens::{decode_sequences, encode_sequence, save_sequences, load_sequences, TokenSequence, STEPS_PER_BAR};
use unmask_core::train::stream;

use crate::commands::{density_targets, is_pitched, load_model, Mode};
use crate::jobs::{JobDescriptor, JobKind, JobRuntime, JobStatus, JobStore, StreamMessage};

pub struct ServiceModel {
    pub name: String,
    pub path: PathBuf,
    pub model: Arc<Model<f32>>,
    pub timesteps: usize,
    pub train_step: u64,
}

pub struct AppState {
    models: BTreeMap<String, ServiceModel>,
    classifier: Option<DensityClassifier>,
    pieces: RwLock<BTreeMap<String, TokenSequence>>,
    jobs: RwLock<BTreeMap<String, Arc<JobRuntime>>>,
    store: JobStore,
    piece_dir: PathBuf,
    next_id: AtomicU64,
}

/// Loads `name=path` checkpoints (or bare paths named by file stem).
pub fn load_registry(specs: &[String]) -> anyhow::Result<BTreeMap<String, ServiceModel>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (stem, p)
            }
        };
        let m = load_model(&path)?;
        if out.contains_key(&name) {
            anyhow::bail!("model name {name} registered twice");
        }
        out.insert(
            name.clone(),
            ServiceModel {
                name,
                path,
                timesteps: m.checkpoint.schedule.timesteps,
                train_step: m.checkpoint.step,
                model: Arc::new(m.model),
            },
        );
    }
    Ok(out)
}

impl AppState {
    /// Restores pieces and the job log from `data_dir`.
    pub fn open(
        models: BTreeMap<String, ServiceModel>,
        classifier: Option<DensityClassifier>,
        data_dir: &Path,
    ) -> anyhow::Result<Arc<Self>> {
        if models.is_empty() {
            anyhow::bail!("at least one checkpoint must be registered");
        }
        let piece_dir = data_dir.join("pieces");
        std::fs::create_dir_all(&piece_dir).with_context(|| format!("creating {}", piece_dir.display()))?;
        let mut pieces = BTreeMap::new();
        let mut max_id = 0;
        for entry in std::fs::read_dir(&piece_dir)? {
            let path = entry?.path();
            let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
                continue;
            };
            if path.extension().is_some_and(|e| e == "tok") {
                if let Some(seq) = load_sequences(&path).ok().and_then(|mut v| v.pop()) {
                    max_id = max_id.max(numeric_suffix(&id));
                    pieces.insert(id, seq);
                }
            }
        }
        let (store, restored) = JobStore::open(&data_dir.join("jobs.jsonl"))
            .with_context(|| format!("opening job log in {}", data_dir.display()))?;
        let mut jobs = BTreeMap::new();
        for d in restored {
            max_id = max_id.max(numeric_suffix(&d.id));
            let rt = JobRuntime::new(d.clone(), None);
            rt.close();
            jobs.insert(d.id.clone(), Arc::new(rt));
        }
        Ok(Arc::new(Self {
            models,
            classifier,
            pieces: RwLock::new(pieces),
            jobs: RwLock::new(jobs),
            store,
            piece_dir,
            next_id: AtomicU64::new(max_id + 1),
        }))
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::SeqCst))
    }

    fn add_piece(&self, seq: TokenSequence) -> Result<String, ApiError> {
        let id = self.fresh_id("p");
        save_sequences(self.piece_dir.join(format!("{id}.tok")), std::slice::from_ref(&seq))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.pieces.write().expect("pieces lock").insert(id.clone(), seq);
        Ok(id)
    }

    fn piece(&self, id: &str) -> Result<TokenSequence, ApiError> {
        self.pieces
            .read()
            .expect("pieces lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_piece", format!("no piece {id}")))
    }

    fn job(&self, id: &str) -> Result<Arc<JobRuntime>, ApiError> {
        self.jobs
            .read()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("no job {id}")))
    }

    fn record(&self, rt: &JobRuntime, update: impl FnOnce(&mut JobDescriptor)) {
        let snapshot = {
            let mut d = rt.descriptor.lock().expect("descriptor lock");
            let before = d.status;
            update(&mut d);
            debug_assert!(before == d.status || before.can_become(d.status));
            d.clone()
        };
        if let Err(e) = self.store.append(&snapshot) {
            eprintln!("job log write failed: {e}");
        }
    }
}

fn numeric_suffix(id: &str) -> u64 {
    id.trim_start_matches(|c: char| c.is_ascii_alphabetic()).parse().unwrap_or(0)
}

/// Structured error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": { "code": self.code, "message": self.message } })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/pieces", get(list_pieces).post(upload_piece))
        .route("/pieces/{id}", get(get_piece))
        .route("/pieces/{id}/midi", get(get_piece_midi))
        .route("/jobs", get(list_jobs).post(start_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/stream", get(stream_job))
        .route("/jobs/{id}/trace", get(get_trace))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/metrics", post(metrics))
        .with_state(state)
}

/// Binds and serves until the process ends.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    println!(
        "{}",
        json!({ "command": "serve", "listening": listener.local_addr()?.to_string() })
    );
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn list_models(State(s): State<Arc<AppState>>) -> Json<Value> {
    let models: Vec<Value> = s
        .models
        .values()
        .map(|m| {
            let c = m.model.config();
            json!({
                "name": m.name,
                "path": m.path,
                "tracks": c.tracks,
                "seq_len": c.seq_len,
                "params": m.model.param_count(),
                "timesteps": m.timesteps,
                "train_step": m.train_step,
            })
        })
        .collect();
    Json(json!({ "models": models, "guidance": s.classifier.is_some() }))
}

fn piece_summary(id: &str, seq: &TokenSequence) -> Value {
    json!({ "id": id, "tracks": seq.tracks(), "steps": seq.steps(), "masked": seq.mask_count() })
}

async fn list_pieces(State(s): State<Arc<AppState>>) -> Json<Value> {
    let pieces = s.pieces.read().expect("pieces lock");
    Json(json!({
        "pieces": pieces.iter().map(|(id, p)| piece_summary(id, p)).collect::<Vec<_>>()
    }))
}

#[derive(Debug, Deserialize)]
struct UploadRequest {
    /// Base64 token file (one or more pieces).
    tokens: Option<String>,
    /// Base64 MIDI file, sliced into windows.
    midi: Option<String>,
    mode: Option<Mode>,
    steps: Option<usize>,
}

async fn upload_piece(
    State(s): State<Arc<AppState>>,
    Json(req): Json<UploadRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let seqs = match (req.tokens, req.midi) {
        (Some(t), None) => {
            let bytes = B64.decode(t).map_err(|e| ApiError::bad("bad_base64", e.to_string()))?;
            decode_sequences(&bytes).map_err(|e| ApiError::bad("bad_tokens", e.to_string()))?
        }
        (None, Some(m)) => {
            let bytes = B64.decode(m).map_err(|e| ApiError::bad("bad_base64", e.to_string()))?;
            let layout = req.mode.unwrap_or(Mode::Melody).into();
            ingest_bytes(&bytes, layout, req.steps.unwrap_or(256))
                .map_err(|e| ApiError::bad("bad_midi", e.to_string()))?
                .0
        }
        _ => return Err(ApiError::bad("bad_request", "send exactly one of tokens or midi")),
    };
    if seqs.is_empty() {
        return Err(ApiError::bad("empty_upload", "upload produced no pieces"));
    }
    let ids = seqs.into_iter().map(|p| s.add_piece(p)).collect::<ApiResult<Vec<_>>>()?;
    Ok((StatusCode::CREATED, Json(json!({ "ids": ids }))))
}

async fn get_piece(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let seq = s.piece(&id)?;
    let mut v = piece_summary(&id, &seq);
    v["tokens"] = Value::String(B64.encode(encode_sequence(&seq)));
    Ok(Json(v))
}

async fn get_piece_midi(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let seq = s.piece(&id)?;
    let bytes = export_midi(&seq, crate::commands::DEFAULT_TEMPO)
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, "not_exportable", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceRequest {
    /// One target for every bar or one per bar.
    pub density: Vec<f64>,
    pub scale: f64,
    #[serde(default)]
    pub track: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRequest {
    pub kind: JobKind,
    pub model: String,
    /// Source piece for infill and accompany.
    #[serde(default)]
    pub piece: Option<String>,
    /// Positions to regenerate (infill).
    #[serde(default)]
    pub mask: Option<MaskPattern>,
    /// Tracks to generate (accompany).
    #[serde(default)]
    pub tracks: Option<Vec<usize>>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub guidance: Option<GuidanceRequest>,
}

/// Validated inputs of a job.
struct Plan {
    model: Arc<Model<f32>>,
    init: TokenSequence,
    pattern: MaskPattern,
    steps: usize,
    guidance: Option<DensityGuidance>,
}

fn plan(s: &AppState, req: &JobRequest) -> ApiResult<Plan> {
    let m = s
        .models
        .get(&req.model)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_model", format!("no model {}", req.model)))?;
    let cfg = m.model.config();
    let steps = req.steps.unwrap_or(m.timesteps);
    if steps == 0 {
        return Err(ApiError::bad("bad_steps", "steps must be at least 1"));
    }
    let source = |s: &AppState| -> ApiResult<TokenSequence> {
        let id = req
            .piece
            .as_deref()
            .ok_or_else(|| ApiError::bad("missing_piece", "this job kind needs a piece"))?;
        let p = s.piece(id)?;
        if p.kinds() != cfg.tracks.as_slice() || p.steps() != cfg.seq_len {
            return Err(ApiError::bad(
                "shape_mismatch",
                format!("piece is {}x{}, model expects {}x{}", p.steps(), p.tracks(), cfg.seq_len, cfg.tracks.len()),
            ));
        }
        if p.has_masks() {
            return Err(ApiError::bad("masked_piece", "source piece contains mask tokens"));
        }
        Ok(p)
    };
    let all = || MaskPattern::all(cfg.seq_len, cfg.tracks.len());
    let (source, pattern) = match req.kind {
        JobKind::Sample | JobKind::Guide => (None, all()),
        JobKind::Infill => {
            let p = source(s)?;
            let mask = req
                .mask
                .clone()
                .ok_or_else(|| ApiError::bad("missing_mask", "infill needs a mask"))?;
            mask.check_shape(&p).map_err(|e| ApiError::bad("bad_mask", e.to_string()))?;
            (Some(p), mask)
        }
        JobKind::Accompany => {
            let p = source(s)?;
            let tracks = req.tracks.clone().unwrap_or_default();
            if p.tracks() < 2 || tracks.is_empty() || tracks.iter().any(|&k| k >= p.tracks()) {
                return Err(ApiError::bad("bad_tracks", "accompany needs a non-empty subset of a multi-track piece's tracks"));
            }
            (Some(p), MaskPattern::tracks_only(cfg.seq_len, cfg.tracks.len(), &tracks))
        }
    };
    let init = match source {
        Some(p) => pattern.apply(&p).map_err(|e| ApiError::bad("bad_mask", e.to_string()))?,
        None => TokenSequence::all_masked(cfg.tracks.clone(), cfg.seq_len, STEPS_PER_BAR),
    };
    let guidance = match (req.kind, &req.guidance) {
        (JobKind::Guide, Some(g)) => {
            let classifier = s
                .classifier
                .clone()
                .ok_or_else(|| ApiError::bad("no_classifier", "service was started without a density classifier"))?;
            if !is_pitched(&cfg.tracks, g.track) {
                return Err(ApiError::bad("bad_tracks", format!("track {} is not pitched", g.track)));
            }
            let targets = density_targets(&g.density, cfg.seq_len / STEPS_PER_BAR)
                .map_err(|e| ApiError::bad("bad_targets", e.to_string()))?;
            Some(DensityGuidance::new(classifier, targets, g.scale, g.track).map_err(|e| ApiError::bad("bad_guidance", e.to_string()))?)
        }
        (JobKind::Guide, None) => return Err(ApiError::bad("missing_guidance", "guide jobs need guidance targets")),
        (_, Some(_)) => return Err(ApiError::bad("bad_request", "guidance is only valid for guide jobs")),
        (_, None) => None,
    };
    Ok(Plan {
        model: Arc::clone(&m.model),
        init,
        pattern,
        steps,
        guidance,
    })
}

async fn start_job(
    State(s): State<Arc<AppState>>,
    Json(req): Json<JobRequest>,
) -> ApiResult<(StatusCode, Json<JobDescriptor>)> {
    let plan = plan(&s, &req)?;
    let id = s.fresh_id("j");
    let descriptor = JobDescriptor {
        id: id.clone(),
        kind: req.kind,
        params: serde_json::to_value(&req).map_err(|e| ApiError::internal(e.to_string()))?,
        status: JobStatus::Pending,
        artifacts: vec![],
        total_steps: if plan.pattern.count() == 0 { 0 } else { plan.steps },
        completed_steps: 0,
        error: None,
        cancelled: false,
        guidance_fallbacks: 0,
    };
    let rt = Arc::new(JobRuntime::new(descriptor.clone(), Some(plan.init.clone())));
    s.record(&rt, |_| {});
    s.jobs.write().expect("jobs lock").insert(id.clone(), Arc::clone(&rt));
    rt.publish(
        &StreamMessage::Start {
            job: id,
            total_steps: descriptor.total_steps,
            init: B64.encode(encode_sequence(&plan.init)),
        },
        false,
    );
    let state = Arc::clone(&s);
    let job = Arc::clone(&rt);
    tokio::task::spawn_blocking(move || run_job(&state, &job, plan, req.seed));
    Ok((StatusCode::CREATED, Json(descriptor)))
}

fn run_job(s: &AppState, rt: &JobRuntime, plan: Plan, seed: u64) {
    s.record(rt, |d| d.status = JobStatus::Running);
    let mut rng = stream(seed, 0, 0);
    let guidance = plan.guidance.as_ref().map(|g| g as &dyn sampler::Guidance);
    let result = sampler::sample(
        plan.model.as_ref(),
        &plan.init,
        &plan.pattern,
        plan.steps,
        guidance,
        &mut rng,
        |step, _| {
            rt.trace.lock().expect("trace lock").push(step.clone());
            rt.descriptor.lock().expect("descriptor lock").completed_steps = step.step_index + 1;
            rt.publish(&StreamMessage::Step(step.clone()), false);
            if rt.cancel_requested() {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        },
    );
    match result {
        Ok(out) => match s.add_piece(out.piece.clone()) {
            Ok(piece) => {
                let tokens = B64.encode(encode_sequence(&out.piece));
                *rt.result.lock().expect("result lock") = Some(out.piece);
                s.record(rt, |d| {
                    d.status = JobStatus::Done;
                    d.artifacts.push(piece.clone());
                    d.guidance_fallbacks = out.guidance_fallbacks;
                });
                rt.publish(&StreamMessage::Done { piece, tokens }, true);
            }
            Err(e) => fail(s, rt, e.message, false),
        },
        Err(e) => {
            let cancelled = matches!(e, SampleError::Cancelled { .. });
            fail(s, rt, e.to_string(), cancelled);
        }
    }
}

fn fail(s: &AppState, rt: &JobRuntime, error: String, cancelled: bool) {
    s.record(rt, |d| {
        d.status = JobStatus::Failed;
        d.error = Some(error.clone());
        d.cancelled = cancelled;
    });
    rt.publish(&StreamMessage::Failed { error, cancelled }, true);
}

async fn list_jobs(State(s): State<Arc<AppState>>) -> Json<Value> {
    let jobs: Vec<JobDescriptor> = s.jobs.read().expect("jobs lock").values().map(|j| j.snapshot()).collect();
    Json(json!({ "jobs": jobs }))
}

async fn get_job(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobDescriptor>> {
    Ok(Json(s.job(&id)?.snapshot()))
}

async fn get_trace(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rt = s.job(&id)?;
    let init = rt
        .init
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::GONE, "trace_unavailable", "trace was not kept across restarts"))?;
    let trace = rt.trace.lock().expect("trace lock").clone();
    let result = rt.result.lock().expect("result lock").as_ref().map(|p| B64.encode(encode_sequence(p)));
    Ok(Json(json!({
        "job": rt.snapshot(),
        "init": B64.encode(encode_sequence(init)),
        "steps": trace,
        "result": result,
    })))
}

async fn cancel_job(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobDescriptor>> {
    let rt = s.job(&id)?;
    if rt.snapshot().status.is_terminal() {
        return Err(ApiError::new(StatusCode::CONFLICT, "job_finished", format!("job {id} already finished")));
    }
    rt.request_cancel();
    Ok(Json(rt.snapshot()))
}

/// Replays every message from the start, then follows live ones until the job
/// ends. Late joiners therefore see the complete, ordered stream.
async fn stream_job(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let rt = s.job(&id)?;
    Ok(ws.on_upgrade(move |socket| follow(socket, rt)))
}

async fn follow(mut socket: WebSocket, rt: Arc<JobRuntime>) {
    let mut rx = rt.subscribe();
    let mut sent = 0;
    loop {
        let (available, closed) = *rx.borrow_and_update();
        for m in rt.messages_from(sent).into_iter().take(available - sent) {
            if socket.send(Message::Text(m.as_ref().into())).await.is_err() {
                return;
            }
            sent += 1;
        }
        if closed && sent >= available {
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
        if rx.changed().await.is_err() {
            return;
        }
    }
}

#[derive(Debug, Deserialize)]
struct MetricsRequest {
    set: Vec<String>,
    ground_truth: Vec<String>,
}

async fn metrics(State(s): State<Arc<AppState>>, Json(req): Json<MetricsRequest>) -> ApiResult<Json<Value>> {
    let load = |ids: &[String]| ids.iter().map(|id| s.piece(id)).collect::<ApiResult<Vec<_>>>();
    let set = load(&req.set)?;
    let gt = load(&req.ground_truth)?;
    let report = evaluate(&set, &gt).map_err(|e| ApiError::bad("metrics", e.to_string()))?;
    Ok(Json(json!({ "scores": report.scores(), "report": report })))
}
