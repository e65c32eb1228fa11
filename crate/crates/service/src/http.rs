//! HTTP job API: submit a generation, poll it, fetch rendered frames.

use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use factor_core::inference::{generate, parse_request, GenerationRequest, RequestContext};
use factor_core::model::{load_checkpoint, ModelState};
use factor_core::synthworld::{rgb, swatch_catalog, Shape, Swatch, Vocabulary, NAMED_COLORS};
use factor_core::tokenizer::{frames_for_timesteps, VideoClip};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, Semaphore};
use tower_http::cors::CorsLayer;

use crate::jobs::{read_snapshot, write_snapshot, ClipRef, JobStore, StoreError};
use crate::render::{frame_png, DEFAULT_SCALE};

/// Side length of the swatch crops offered by `/v1/vocab`.
pub const SWATCH_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub max_concurrency: usize,
    /// Jobs kept in the store, finished or not.
    pub retention: usize,
    /// Unfinished jobs accepted before answering 429.
    pub queue_capacity: usize,
    /// Job snapshot and generated clips live here.
    pub state_dir: PathBuf,
    pub pixel_scale: u32,
    pub max_extensions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: ([127, 0, 0, 1], 8080).into(),
            checkpoint: PathBuf::from("model.fckp"),
            max_concurrency: 1,
            retention: 256,
            queue_capacity: 32,
            state_dir: PathBuf::from("factor-state"),
            pixel_scale: DEFAULT_SCALE,
            max_extensions: 4,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrency == 0 {
            return Err("max concurrency must be at least 1".into());
        }
        if self.retention == 0 || self.queue_capacity == 0 {
            return Err("retention and queue capacity must be at least 1".into());
        }
        Ok(())
    }
}

pub struct Service {
    pub config: ServiceConfig,
    pub model: Arc<ModelState>,
    store: Mutex<JobStore>,
    snapshot_lock: Mutex<()>,
    vocab: Vocabulary,
    swatches: Vec<Swatch>,
    queue: mpsc::UnboundedSender<(String, GenerationRequest)>,
}

impl Service {
    fn snapshot_path(&self) -> PathBuf {
        self.config.state_dir.join("jobs.json")
    }

    fn clip_path(&self, clip_id: &str) -> PathBuf {
        clip_path(&self.config.state_dir, clip_id)
    }

    /// Writes the store to disk; the lock keeps writes in order.
    fn persist(&self) {
        let _guard = self.snapshot_lock.lock().expect("snapshot lock");
        let snap = self.store.lock().expect("store lock").snapshot();
        if let Err(e) = write_snapshot(&self.snapshot_path(), &snap) {
            eprintln!("warning: could not write job snapshot: {e}");
        }
    }

    pub fn job_count(&self) -> usize {
        self.store.lock().expect("store lock").len()
    }

    fn run_job(&self, id: &str, request: &GenerationRequest) -> Result<ClipRef, String> {
        let generation = generate(&self.model, request).map_err(|e| e.to_string())?;
        let path = self.clip_path(id);
        std::fs::write(&path, generation.clip.to_bytes()).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(ClipRef {
            clip_id: id.to_string(),
            frames: generation.clip.len(),
        })
    }
}

fn clip_path(state_dir: &FsPath, clip_id: &str) -> PathBuf {
    state_dir.join("clips").join(format!("{clip_id}.fclp"))
}

pub fn load_model(path: &FsPath) -> Result<ModelState, String> {
    load_checkpoint(path).map(|(m, _)| m).map_err(|e| e.to_string())
}

async fn dispatch(service: Arc<Service>, mut rx: mpsc::UnboundedReceiver<(String, GenerationRequest)>) {
    let permits = Arc::new(Semaphore::new(service.config.max_concurrency));
    while let Some((id, request)) = rx.recv().await {
        let permit = permits.clone().acquire_owned().await.expect("semaphore is never closed");
        if service.store.lock().expect("store lock").start(&id).is_err() {
            continue;
        }
        service.persist();
        let svc = service.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = svc.run_job(&id, &request);
            if let Err(e) = svc.store.lock().expect("store lock").finish(&id, outcome) {
                eprintln!("warning: {e}");
            }
            svc.persist();
            drop(permit);
        });
    }
}

/// Restores the job store from `state_dir`, starts the decode dispatcher
/// and returns the router. Must run inside a Tokio runtime.
pub fn build(config: ServiceConfig, model: ModelState) -> Result<(Router, Arc<Service>), String> {
    config.validate()?;
    let clips = config.state_dir.join("clips");
    std::fs::create_dir_all(&clips).map_err(|e| format!("{}: {e}", clips.display()))?;
    let snap_path = config.state_dir.join("jobs.json");
    let store = match read_snapshot(&snap_path).map_err(|e| format!("{}: {e}", snap_path.display()))? {
        Some(snap) => JobStore::restore(snap, config.retention, config.queue_capacity, |id| {
            clip_path(&config.state_dir, id).exists()
        }),
        None => JobStore::new(config.retention, config.queue_capacity),
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let service = Arc::new(Service {
        config,
        model: Arc::new(model),
        store: Mutex::new(store),
        snapshot_lock: Mutex::new(()),
        vocab: Vocabulary::default(),
        swatches: swatch_catalog(SWATCH_SIZE),
        queue: tx,
    });
    service.persist();
    tokio::spawn(dispatch(service.clone(), rx));
    let router = Router::new()
        .route("/v1/generate", post(submit))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/clips/{id}/frames/{k}", get(frame))
        .route("/v1/vocab", get(vocab))
        .route("/v1/health", get(health))
        .layer(CorsLayer::permissive())
        .with_state(service.clone());
    Ok((router, service))
}

/// Loads the checkpoint and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), String> {
    let model = load_model(&config.checkpoint)?;
    let bind = config.bind;
    let (router, _) = build(config, model)?;
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| format!("bind {bind}: {e}"))?;
    eprintln!("listening on http://{bind}");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn submit(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return error(StatusCode::BAD_REQUEST, "body is not UTF-8"),
    };
    let cfg = &svc.model.config;
    let ctx = RequestContext {
        vocab: &svc.vocab,
        swatches: &svc.swatches,
        palette_size: cfg.vocab,
        prompt_len: cfg.conditioning.prompt_len,
        slots: cfg.conditioning.slots,
        max_extensions: svc.config.max_extensions,
    };
    let (wire, request) = match parse_request(text).and_then(|w| w.resolve(&ctx).map(|r| (w, r))) {
        Ok(v) => v,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": e.message, "field": e.field })),
            )
                .into_response()
        }
    };
    let submitted = svc.store.lock().expect("store lock").submit(wire);
    match submitted {
        Ok((id, evicted)) => {
            for job in evicted {
                let _ = std::fs::remove_file(svc.clip_path(&job.id));
            }
            svc.persist();
            if svc.queue.send((id.clone(), request)).is_err() {
                return error(StatusCode::SERVICE_UNAVAILABLE, "decode workers are gone");
            }
            (StatusCode::ACCEPTED, Json(json!({ "id": id, "status": "queued" }))).into_response()
        }
        Err(StoreError::Full) => error(StatusCode::TOO_MANY_REQUESTS, "job queue is full, retry later"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn job(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    let store = svc.store.lock().expect("store lock");
    match store.get(&id) {
        Some(job) => {
            let mut v = serde_json::to_value(job).expect("job serializes");
            if let Some(r) = &job.result {
                v["frames_url"] = Value::String(format!("/v1/clips/{}/frames/{{k}}", r.clip_id));
            }
            Json(v).into_response()
        }
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

#[derive(Deserialize)]
struct FrameQuery {
    scale: Option<u32>,
}

async fn frame(State(svc): State<Arc<Service>>, Path((id, k)): Path<(String, usize)>, Query(q): Query<FrameQuery>) -> Response {
    let known = {
        let store = svc.store.lock().expect("store lock");
        store
            .get(&id)
            .and_then(|j| j.result.as_ref())
            .map(|r| r.clip_id.clone())
    };
    let Some(clip_id) = known else {
        return error(StatusCode::NOT_FOUND, format!("no finished clip {id}"));
    };
    let path = svc.clip_path(&clip_id);
    let clip = match std::fs::File::open(&path).map_err(|e| e.to_string()).and_then(|f| {
        VideoClip::read_from(std::io::BufReader::new(f)).map_err(|e| e.to_string())
    }) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::NOT_FOUND, format!("clip {clip_id}: {e}")),
    };
    if k >= clip.len() {
        return error(StatusCode::NOT_FOUND, format!("clip {clip_id} has {} frames", clip.len()));
    }
    let scale = q.scale.unwrap_or(svc.config.pixel_scale).clamp(1, 64);
    ([(header::CONTENT_TYPE, "image/png")], frame_png(clip.frame(k), scale)).into_response()
}

async fn vocab(State(svc): State<Arc<Service>>) -> Response {
    let cfg = &svc.model.config;
    let words: Vec<&str> = (1..svc.vocab.len()).filter_map(|i| svc.vocab.word(i)).collect();
    let colors: Vec<Value> = NAMED_COLORS
        .iter()
        .map(|(name, idx)| json!({ "name": name, "palette_index": idx, "rgb": rgb(*idx) }))
        .collect();
    let control = svc.model.conditioning.is_some();
    Json(json!({
        "descriptions": Shape::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "words": words,
        "colors": colors,
        "swatches": svc.swatches,
        "max_entities": if control { cfg.conditioning.slots } else { 0 },
        "control": control,
        "prompt_len": cfg.conditioning.prompt_len,
        "frames_per_window": frames_for_timesteps(cfg.timesteps),
        "max_extensions": svc.config.max_extensions,
        "grid": { "height": cfg.height, "width": cfg.grid_width },
    }))
    .into_response()
}

async fn health(State(svc): State<Arc<Service>>) -> Response {
    let store = svc.store.lock().expect("store lock");
    Json(json!({
        "status": "ok",
        "jobs": store.len(),
        "queued": store.queued(),
        "running": store.running(),
        "peak_running": store.peak_running(),
        "max_concurrency": svc.config.max_concurrency,
    }))
    .into_response()
}
