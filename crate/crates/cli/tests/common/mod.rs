#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ovseg::synthetic_config;
use ovseg_core::feature::wire::{decode_png_b64, encode_mask_b64};
use ovseg_core::feature::{FeatureProvider, SyntheticProvider};
use ovseg_core::pipeline::PipelineConfig;
use ovseg_core::synthetic::{generate, write_scene_dir, SyntheticConfig};
use serde_json::{json, Value};

pub const SPACING: f64 = 0.03;

/// Writes the synthetic scene and its config into `dir`; returns the config path.
pub fn synthetic_dir(dir: &Path) -> PathBuf {
    let scene = generate(&SyntheticConfig {
        spacing: SPACING,
        ..SyntheticConfig::default()
    })
    .unwrap();
    write_scene_dir(&scene, dir).unwrap();
    let path = dir.join("ovseg.toml");
    std::fs::write(&path, synthetic_config(SPACING).to_toml_string()).unwrap();
    path
}

pub fn load(path: &Path) -> PipelineConfig {
    PipelineConfig::load(path).unwrap()
}

/// Fault injection for [`MockProvider`].
#[derive(Default)]
pub struct Faults {
    /// Requests answered with 503 + `Retry-After: 0` before serving normally.
    pub unavailable_first: AtomicUsize,
    /// After this many successful `embed_image` calls every request gets 500.
    pub image_budget: Mutex<Option<usize>>,
}

/// In-process HTTP model service backed by [`SyntheticProvider`].
pub struct MockProvider {
    pub addr: SocketAddr,
    pub calls: Arc<Mutex<Vec<String>>>,
    pub faults: Arc<Faults>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

#[derive(Clone)]
struct MockState {
    inner: Arc<SyntheticProvider>,
    name: String,
    calls: Arc<Mutex<Vec<String>>>,
    faults: Arc<Faults>,
    image_calls: Arc<AtomicUsize>,
}

impl MockState {
    fn gate(&self, endpoint: &str) -> Option<Response> {
        self.calls.lock().unwrap().push(endpoint.to_owned());
        let pending = self.faults.unavailable_first.load(Ordering::SeqCst);
        if pending > 0 {
            self.faults.unavailable_first.store(pending - 1, Ordering::SeqCst);
            let mut h = HeaderMap::new();
            h.insert("retry-after", "0".parse().unwrap());
            return Some((StatusCode::SERVICE_UNAVAILABLE, h, "loading").into_response());
        }
        if let Some(budget) = *self.faults.image_budget.lock().unwrap() {
            if self.image_calls.load(Ordering::SeqCst) >= budget {
                return Some((StatusCode::INTERNAL_SERVER_ERROR, "crashed").into_response());
            }
        }
        None
    }
}

fn bad(msg: impl ToString) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn info(State(s): State<MockState>) -> Response {
    if let Some(r) = s.gate("info") {
        return r;
    }
    Json(json!({
        "name": s.name,
        "dim": s.inner.info().dim,
        "image_model": "mock-image",
        "text_model": "mock-text",
    }))
    .into_response()
}

async fn embed_image(State(s): State<MockState>, Json(body): Json<Value>) -> Response {
    if let Some(r) = s.gate("embed_image") {
        return r;
    }
    let Some(img) = body["image"].as_str() else { return bad("image missing") };
    let img = match decode_png_b64(img) {
        Ok(i) => i,
        Err(e) => return bad(e),
    };
    s.image_calls.fetch_add(1, Ordering::SeqCst);
    match s.inner.embed_image(&img) {
        Ok(v) => Json(json!({ "embedding": v.as_slice() })).into_response(),
        Err(e) => bad(e),
    }
}

async fn embed_text(State(s): State<MockState>, Json(body): Json<Value>) -> Response {
    if let Some(r) = s.gate("embed_text") {
        return r;
    }
    match body["text"].as_str().map(|t| s.inner.embed_text(t)) {
        Some(Ok(v)) => Json(json!({ "embedding": v.as_slice() })).into_response(),
        Some(Err(e)) => bad(e),
        None => bad("text missing"),
    }
}

async fn segment(State(s): State<MockState>, Json(body): Json<Value>) -> Response {
    if let Some(r) = s.gate("segment") {
        return r;
    }
    let img = match body["image"].as_str().map(decode_png_b64) {
        Some(Ok(i)) => i,
        _ => return bad("image missing"),
    };
    let points: Vec<[f64; 2]> = match serde_json::from_value(body["points"].clone()) {
        Ok(p) => p,
        Err(e) => return bad(e),
    };
    match s.inner.segment(&img, &points) {
        Ok(m) => Json(json!({ "mask": encode_mask_b64(&m) })).into_response(),
        Err(e) => bad(e),
    }
}

impl MockProvider {
    pub fn start(name: &str, dim: usize) -> Self {
        let calls = Arc::new(Mutex::new(Vec::new()));
        let faults = Arc::new(Faults::default());
        let state = MockState {
            inner: Arc::new(SyntheticProvider::new(name, dim).unwrap()),
            name: name.to_owned(),
            calls: calls.clone(),
            faults: faults.clone(),
            image_calls: Arc::new(AtomicUsize::new(0)),
        };
        let app = Router::new()
            .route("/info", get(info))
            .route("/embed_image", post(embed_image))
            .route("/embed_text", post(embed_text))
            .route("/segment", post(segment))
            .with_state(state);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        Self {
            addr: addr_rx.recv().unwrap(),
            calls,
            faults,
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn count(&self, endpoint: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| *c == endpoint).count()
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
    }
}

impl Drop for MockProvider {
    fn drop(&mut self) {
        self.stop();
    }
}
