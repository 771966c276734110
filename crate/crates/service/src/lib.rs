//! Inference server: `POST /predict`, `GET /health`, `GET /model/info` and
//! the `/stream` WebSocket.
//!
//! Environment:
//! - `GAZE_MODEL_PATH` checkpoint to serve (required by [`ServiceConfig::from_env`])
//! - `GAZE_PORT` listen port, default 8080
//! - `GAZE_QUEUE_DEPTH` admitted requests before `503 queue_full`, default 8
//! - `GAZE_WORKERS` concurrent inferences, default 1
//! - `GAZE_TIMEOUT_MS` per-request inference timeout, default 10000
//! - `GAZE_KEEPALIVE_S` WebSocket ping interval, default 15

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::{SinkExt, StreamExt};
use gaze_core::geometry::LandmarkSet;
use gaze_core::predict::{ModelInfo, Predictor};
use gaze_core::GazeError;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, Notify, Semaphore};

/// What the server needs from a model. [`Predictor`] is the real one;
/// tests substitute stubs.
pub trait GazePredictor: Send + Sync + 'static {
    fn predict(&self, image: &RgbImage, landmarks: Option<&LandmarkSet>) -> Result<[f64; 2], GazeError>;
    fn fingerprint(&self) -> String;
    fn info(&self) -> serde_json::Value;
}

impl GazePredictor for Predictor {
    fn predict(&self, image: &RgbImage, landmarks: Option<&LandmarkSet>) -> Result<[f64; 2], GazeError> {
        match landmarks {
            Some(lm) => self.predict_frame(image, lm),
            // No server-side landmark detector is bundled.
            None => Err(GazeError::InvalidRegion("no landmarks supplied and no detector configured".into())),
        }
    }

    fn fingerprint(&self) -> String {
        Predictor::fingerprint(self).to_string()
    }

    fn info(&self) -> serde_json::Value {
        let info: ModelInfo = Predictor::info(self);
        serde_json::to_value(info).expect("model info serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_path: Option<PathBuf>,
    pub port: u16,
    pub queue_depth: usize,
    pub workers: usize,
    pub timeout: Duration,
    pub keepalive: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            port: 8080,
            queue_depth: 8,
            workers: 1,
            timeout: Duration::from_secs(10),
            keepalive: Duration::from_secs(15),
        }
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        fn parse<T: std::str::FromStr>(key: &str, v: Option<String>, default: T) -> Result<T, String> {
            match v {
                None => Ok(default),
                Some(s) => s.trim().parse().map_err(|_| format!("{key}: cannot parse `{s}`")),
            }
        }
        let d = Self::default();
        let cfg = Self {
            model_path: get("GAZE_MODEL_PATH").map(PathBuf::from),
            port: parse("GAZE_PORT", get("GAZE_PORT"), d.port)?,
            queue_depth: parse("GAZE_QUEUE_DEPTH", get("GAZE_QUEUE_DEPTH"), d.queue_depth)?,
            workers: parse("GAZE_WORKERS", get("GAZE_WORKERS"), d.workers)?,
            timeout: Duration::from_millis(parse("GAZE_TIMEOUT_MS", get("GAZE_TIMEOUT_MS"), 10_000u64)?),
            keepalive: Duration::from_secs(parse("GAZE_KEEPALIVE_S", get("GAZE_KEEPALIVE_S"), 15u64)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.queue_depth == 0 {
            return Err("GAZE_QUEUE_DEPTH must be at least 1".into());
        }
        if self.workers == 0 {
            return Err("GAZE_WORKERS must be at least 1".into());
        }
        if self.keepalive.is_zero() {
            return Err("GAZE_KEEPALIVE_S must be at least 1".into());
        }
        Ok(())
    }
}

enum ModelState {
    Loading,
    Ready(Arc<dyn GazePredictor>),
    Failed(String),
}

pub struct AppState {
    model: RwLock<ModelState>,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
    timeout: Duration,
    keepalive: Duration,
}

impl AppState {
    /// State with no model yet; `/health` reports `loading`.
    pub fn new(cfg: &ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(ModelState::Loading),
            admission: Arc::new(Semaphore::new(cfg.queue_depth)),
            workers: Arc::new(Semaphore::new(cfg.workers)),
            timeout: cfg.timeout,
            keepalive: cfg.keepalive,
        })
    }

    pub fn with_model(cfg: &ServiceConfig, model: Arc<dyn GazePredictor>) -> Arc<Self> {
        let s = Self::new(cfg);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: Arc<dyn GazePredictor>) {
        *self.model.write().expect("model lock") = ModelState::Ready(model);
    }

    pub fn set_failed(&self, reason: String) {
        *self.model.write().expect("model lock") = ModelState::Failed(reason);
    }

    fn model(&self) -> Result<Arc<dyn GazePredictor>, ApiError> {
        match &*self.model.read().expect("model lock") {
            ModelState::Ready(m) => Ok(m.clone()),
            ModelState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "model is still loading")),
            ModelState::Failed(r) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", format!("model failed to load: {r}"))),
        }
    }

    /// Runs one prediction through the bounded queue.
    async fn run(&self, image: RgbImage, landmarks: Option<LandmarkSet>) -> Result<([f64; 2], String), ApiError> {
        let model = self.model()?;
        let _admitted = self
            .admission
            .clone()
            .try_acquire_owned()
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", "inference queue is full"))?;
        let workers = self.workers.clone();
        let job = async move {
            let permit = workers.acquire_owned().await.expect("worker semaphore open");
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                let p = model.predict(&image, landmarks.as_ref());
                (p, model.fingerprint())
            })
            .await
        };
        match tokio::time::timeout(self.timeout, job).await {
            Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "inference timed out")),
            Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
            Ok(Ok((Ok(p), fp))) => Ok((p, fp)),
            Ok(Ok((Err(e), _))) => Err(ApiError::from_gaze(e)),
        }
    }
}

/// Error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn from_gaze(e: GazeError) -> Self {
        match e {
            GazeError::InvalidLandmarks(m) => Self::bad("malformed_landmarks", m),
            e @ (GazeError::InvalidRegion(_) | GazeError::Degenerate(_)) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_face", e.to_string())
            }
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }

    fn body(&self) -> serde_json::Value {
        json!({"error": {"code": self.code, "message": self.message}})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictJson {
    image: Option<String>,
    landmarks: Option<serde_json::Value>,
    ts: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub gaze_cm: [f64; 2],
    /// Reserved; the model gives point estimates only.
    pub confidence: Option<f64>,
    pub processing_ms: f64,
    pub model_fingerprint: String,
    pub ts: Option<f64>,
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ApiError> {
    if bytes.is_empty() {
        return Err(ApiError::bad("missing_image", "image is empty"));
    }
    image::load_from_memory(bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| ApiError::bad("undecodable_image", e.to_string()))
}

fn decode_base64_image(text: &str) -> Result<RgbImage, ApiError> {
    // Accept data URLs as produced by canvas.toDataURL.
    let payload = match text.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => text,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad("undecodable_image", format!("bad base64: {e}")))?;
    decode_image(&bytes)
}

fn parse_landmarks(v: &serde_json::Value, frame: (u32, u32)) -> Result<LandmarkSet, ApiError> {
    LandmarkSet::from_json(&v.to_string(), frame).map_err(|e| ApiError::bad("malformed_landmarks", e.to_string()))
}

/// JSON `{image: base64, landmarks?: [[x, y]; 68], ts?}` or a raw image body
/// with landmarks in the `x-gaze-landmarks` header.
fn parse_predict(headers: &HeaderMap, body: &[u8]) -> Result<(RgbImage, Option<LandmarkSet>, Option<f64>), ApiError> {
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ctype.starts_with("application/json") {
        let req: PredictJson =
            serde_json::from_slice(body).map_err(|e| ApiError::bad("malformed_request", e.to_string()))?;
        let text = req.image.ok_or_else(|| ApiError::bad("missing_image", "field `image` is required"))?;
        let image = decode_base64_image(&text)?;
        let lm = req
            .landmarks
            .as_ref()
            .filter(|v| !v.is_null())
            .map(|v| parse_landmarks(v, image.dimensions()))
            .transpose()?;
        Ok((image, lm, req.ts))
    } else {
        let image = if body.is_empty() {
            return Err(ApiError::bad("missing_image", "request body is empty"));
        } else {
            decode_image(body)?
        };
        let lm = match headers.get("x-gaze-landmarks") {
            None => None,
            Some(v) => {
                let text = v.to_str().map_err(|_| ApiError::bad("malformed_landmarks", "header is not ascii"))?;
                let value: serde_json::Value =
                    serde_json::from_str(text).map_err(|e| ApiError::bad("malformed_landmarks", e.to_string()))?;
                Some(parse_landmarks(&value, image.dimensions())?)
            }
        };
        let ts = headers
            .get("x-gaze-ts")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.parse().ok());
        Ok((image, lm, ts))
    }
}

async fn predict(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let start = Instant::now();
    state.model()?;
    let (image, lm, ts) = parse_predict(&headers, &body)?;
    let (gaze_cm, fp) = state.run(image, lm).await?;
    Ok(Json(PredictResponse {
        gaze_cm,
        confidence: None,
        processing_ms: start.elapsed().as_secs_f64() * 1e3,
        model_fingerprint: fp,
        ts,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(match &*state.model.read().expect("model lock") {
        ModelState::Loading => json!({"status": "loading"}),
        ModelState::Ready(m) => json!({"status": "ok", "model_fingerprint": m.fingerprint()}),
        ModelState::Failed(r) => json!({"status": "error", "message": r}),
    })
}

async fn model_info(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(state.model()?.info()))
}

/// Incoming stream frame.
#[derive(Debug, Deserialize)]
struct StreamFrame {
    seq: u64,
    ts: f64,
    image: String,
    #[serde(default)]
    landmarks: Option<serde_json::Value>,
}

/// WebSocket close codes used for protocol violations.
pub mod close_code {
    pub const UNSUPPORTED: u16 = 1003;
    pub const POLICY: u16 = 1008;
}

async fn stream(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_session(state, socket))
}

/// Latest-wins session: the reader keeps only the newest pending frame; one
/// worker answers frames in arrival order, so responses never reorder.
async fn stream_session(state: Arc<AppState>, socket: WebSocket) {
    let (sink, mut source) = socket.split();
    let sink = Arc::new(Mutex::new(sink));
    let pending: Arc<std::sync::Mutex<Option<StreamFrame>>> = Arc::default();
    let wake = Arc::new(Notify::new());
    let done = Arc::new(tokio::sync::watch::channel(false).0);

    let worker = {
        let (sink, pending, wake, state) = (sink.clone(), pending.clone(), wake.clone(), state.clone());
        let mut stop = done.subscribe();
        tokio::spawn(async move {
            loop {
                let frame = pending.lock().expect("pending lock").take();
                let Some(f) = frame else {
                    tokio::select! {
                        _ = wake.notified() => continue,
                        _ = stop.changed() => return,
                    }
                };
                let reply = answer_frame(&state, f).await;
                if sink.lock().await.send(Message::Text(reply.to_string().into())).await.is_err() {
                    return;
                }
            }
        })
    };

    let pinger = {
        let sink = sink.clone();
        let every = state.keepalive;
        let mut stop = done.subscribe();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + every, every);
            loop {
                tokio::select! {
                    _ = tick.tick() => {
                        if sink.lock().await.send(Message::Ping(Bytes::from_static(b"keepalive"))).await.is_err() {
                            return;
                        }
                    }
                    _ = stop.changed() => return,
                }
            }
        })
    };

    let mut last_seq: Option<u64> = None;
    let violation = loop {
        let Some(msg) = source.next().await else { break None };
        let Ok(msg) = msg else { break None };
        match msg {
            Message::Text(t) => match serde_json::from_str::<StreamFrame>(&t) {
                Ok(f) if last_seq.is_some_and(|s| f.seq <= s) => {
                    break Some((close_code::POLICY, format!("seq {} is not greater than {}", f.seq, last_seq.unwrap())));
                }
                Ok(f) => {
                    last_seq = Some(f.seq);
                    *pending.lock().expect("pending lock") = Some(f);
                    wake.notify_one();
                }
                Err(e) => break Some((close_code::POLICY, format!("malformed frame: {e}"))),
            },
            Message::Binary(_) => break Some((close_code::UNSUPPORTED, "binary frames are not supported".into())),
            Message::Close(_) => break None,
            Message::Ping(_) | Message::Pong(_) => {}
        }
    };
    let _ = done.send(true);
    pinger.abort();
    if let Some((code, reason)) = violation {
        worker.abort();
        let mut s = sink.lock().await;
        let _ = s
            .send(Message::Close(Some(CloseFrame {
                code,
                reason: reason.into(),
            })))
            .await;
    } else {
        let _ = worker.await;
    }
}

async fn answer_frame(state: &AppState, f: StreamFrame) -> serde_json::Value {
    let start = Instant::now();
    let result = async {
        let image = decode_base64_image(&f.image)?;
        let lm = f
            .landmarks
            .as_ref()
            .filter(|v| !v.is_null())
            .map(|v| parse_landmarks(v, image.dimensions()))
            .transpose()?;
        state.run(image, lm).await
    }
    .await;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(([x, y], _)) => json!({"seq": f.seq, "ts": f.ts, "x_cm": x, "y_cm": y, "ms": ms}),
        Err(e) => json!({"seq": f.seq, "ts": f.ts, "ms": ms, "error": {"code": e.code, "message": e.message}}),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/model/info", get(model_info))
        .route("/stream", get(stream))
        .with_state(state)
}

/// Binds, then loads the model in the background so `/health` answers
/// `loading` meanwhile. Runs until the listener fails.
pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(&cfg);
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    match cfg.model_path.clone() {
        Some(path) => {
            let st = state.clone();
            tokio::task::spawn_blocking(move || match Predictor::load(&path) {
                Ok(p) => {
                    log::info!("loaded {} ({})", path.display(), p.fingerprint());
                    st.set_model(Arc::new(p));
                }
                Err(e) => {
                    log::error!("cannot load {}: {e}", path.display());
                    st.set_failed(e.to_string());
                }
            });
        }
        None => state.set_failed("no model path configured (GAZE_MODEL_PATH)".into()),
    }
    axum::serve(listener, router(state)).await
}
