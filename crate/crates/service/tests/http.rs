use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use gaze_core::config::{preset, Profile};
use gaze_core::geometry::LandmarkSet;
use gaze_core::model::build_model;
use gaze_core::pipeline::inference_config;
use gaze_core::predict::Predictor;
use gaze_core::synthgen::{generate, SynthConfig};
use gaze_core::GazeError;
use gaze_service::{router, AppState, GazePredictor, PredictResponse, ServiceConfig};
use http_body_util::BodyExt;
use image::RgbImage;
use serde_json::{json, Value};
use tower::ServiceExt;

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 3) as u8, 90]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post_json(v: &Value) -> Request<Body> {
    Request::post("/predict")
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

struct Stub {
    delay: Duration,
}

impl GazePredictor for Stub {
    fn predict(&self, image: &RgbImage, _: Option<&LandmarkSet>) -> Result<[f64; 2], GazeError> {
        std::thread::sleep(self.delay);
        Ok([image.width() as f64 / 10.0, -(image.height() as f64) / 10.0])
    }
    fn fingerprint(&self) -> String {
        "stub".into()
    }
    fn info(&self) -> Value {
        json!({"kind": "stub"})
    }
}

fn toy_predictor() -> Predictor {
    let cfg = preset(13, Profile::Toy).unwrap();
    let model = build_model::<f32>(&cfg.model).unwrap();
    Predictor::new(model, inference_config(&cfg), "toy".into())
}

#[tokio::test]
async fn predict_matches_direct_library_call_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_subjects: 2,
        frames_per_subject: 25,
        frame_size: (360, 360),
        seed: 3,
        ..SynthConfig::default()
    };
    let manifest = generate(&synth, dir.path()).unwrap();
    assert_eq!(manifest.frames.len(), 50);
    let predictor = Arc::new(toy_predictor());
    let app = router(AppState::with_model(&ServiceConfig::default(), predictor.clone()));
    for (i, f) in manifest.frames.iter().enumerate() {
        let bytes = std::fs::read(dir.path().join(&f.frame_path)).unwrap();
        let image = image::load_from_memory(&bytes).unwrap().to_rgb8();
        let lm = LandmarkSet::new(f.landmarks.clone(), image.dimensions()).unwrap();
        let direct = predictor.predict_frame(&image, &lm).unwrap();
        // Alternate between the JSON and the raw-body request forms.
        let req = if i % 2 == 0 {
            post_json(&json!({"image": b64(&bytes), "landmarks": f.landmarks, "ts": i as f64}))
        } else {
            Request::post("/predict")
                .header("content-type", "image/png")
                .header("x-gaze-landmarks", serde_json::to_string(&f.landmarks).unwrap())
                .header("x-gaze-ts", i.to_string())
                .body(Body::from(bytes))
                .unwrap()
        };
        let (status, body) = call(&app, req).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let resp: PredictResponse = serde_json::from_value(body).unwrap();
        assert_eq!(resp.gaze_cm[0].to_bits(), direct[0].to_bits(), "frame {i}");
        assert_eq!(resp.gaze_cm[1].to_bits(), direct[1].to_bits(), "frame {i}");
        assert_eq!(resp.ts, Some(i as f64));
        assert_eq!(resp.model_fingerprint, "toy");
        assert!(resp.confidence.is_none());
    }
}

#[tokio::test]
async fn health_reports_loading_then_ok() {
    let state = AppState::new(&ServiceConfig::default());
    let app = router(state.clone());
    let (s, v) = call(&app, get("/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "loading"}));
    let (s, v) = call(&app, get("/model/info")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(code(&v), "model_not_loaded");
    let (s, v) = call(&app, post_json(&json!({"image": b64(&png(8, 8))}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(code(&v), "model_not_loaded");

    state.set_model(Arc::new(Stub { delay: Duration::ZERO }));
    let (_, v) = call(&app, get("/health")).await;
    assert_eq!(v, json!({"status": "ok", "model_fingerprint": "stub"}));
    let (s, v) = call(&app, get("/model/info")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"kind": "stub"}));
}

#[tokio::test]
async fn model_info_of_real_predictor() {
    let app = router(AppState::with_model(&ServiceConfig::default(), Arc::new(toy_predictor())));
    let (s, v) = call(&app, get("/model/info")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["fingerprint"], "toy");
    assert!(v["parameter_count"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn malformed_requests_get_coded_4xx() {
    let real = router(AppState::with_model(&ServiceConfig::default(), Arc::new(toy_predictor())));
    let img = b64(&png(400, 400));
    let cases: Vec<(Request<Body>, StatusCode, &str)> = vec![
        (post_json(&json!({"ts": 1.0})), StatusCode::BAD_REQUEST, "missing_image"),
        (post_json(&json!({"image": "%%%not base64"})), StatusCode::BAD_REQUEST, "undecodable_image"),
        (post_json(&json!({"image": b64(b"not an image")})), StatusCode::BAD_REQUEST, "undecodable_image"),
        (post_json(&json!({"image": img, "landmarks": [[1.0, 2.0]]})), StatusCode::BAD_REQUEST, "malformed_landmarks"),
        (post_json(&json!({"image": img, "landmarks": "x"})), StatusCode::BAD_REQUEST, "malformed_landmarks"),
        (post_json(&json!({"image": img, "bogus": 1})), StatusCode::BAD_REQUEST, "malformed_request"),
        (
            Request::post("/predict").header("content-type", "application/json").body(Body::from("{")).unwrap(),
            StatusCode::BAD_REQUEST,
            "malformed_request",
        ),
        (
            Request::post("/predict").header("content-type", "image/png").body(Body::empty()).unwrap(),
            StatusCode::BAD_REQUEST,
            "missing_image",
        ),
        // No landmarks and no detector: nothing locates a face.
        (post_json(&json!({"image": img})), StatusCode::UNPROCESSABLE_ENTITY, "no_face"),
        // Landmarks entirely outside the frame.
        (
            post_json(&json!({"image": img, "landmarks": vec![[5000.0, 5000.0]; 68]})),
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_face",
        ),
    ];
    for (i, (req, status, c)) in cases.into_iter().enumerate() {
        let (s, v) = call(&real, req).await;
        assert_eq!((s, code(&v)), (status, c), "case {i}: {v}");
        assert!(v["error"]["message"].is_string());
    }
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let cfg = ServiceConfig {
        queue_depth: 64,
        workers: 4,
        ..ServiceConfig::default()
    };
    let app = router(AppState::with_model(&cfg, Arc::new(Stub { delay: Duration::from_millis(5) })));
    let body = json!({"image": b64(&png(20, 30))});
    let futs = (0..16).map(|_| call(&app, post_json(&body)));
    let results = futures::future::join_all(futs).await;
    for (s, v) in &results {
        assert_eq!(*s, StatusCode::OK);
        assert_eq!(v["gaze_cm"], json!([2.0, -3.0]));
    }
}

#[tokio::test]
async fn full_queue_and_timeout_are_reported() {
    let cfg = ServiceConfig {
        queue_depth: 1,
        ..ServiceConfig::default()
    };
    let app = router(AppState::with_model(&cfg, Arc::new(Stub { delay: Duration::from_millis(300) })));
    let body = json!({"image": b64(&png(4, 4))});
    let (a, b) = tokio::join!(call(&app, post_json(&body)), async {
        tokio::time::sleep(Duration::from_millis(50)).await;
        call(&app, post_json(&body)).await
    });
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!((b.0, code(&b.1)), (StatusCode::SERVICE_UNAVAILABLE, "queue_full"));

    let cfg = ServiceConfig {
        timeout: Duration::from_millis(20),
        ..ServiceConfig::default()
    };
    let app = router(AppState::with_model(&cfg, Arc::new(Stub { delay: Duration::from_millis(200) })));
    let (s, v) = call(&app, post_json(&body)).await;
    assert_eq!((s, code(&v)), (StatusCode::GATEWAY_TIMEOUT, "timeout"));
}

#[test]
fn config_from_env_lookup() {
    let env = |pairs: &'static [(&'static str, &'static str)]| {
        move |k: &str| pairs.iter().find(|(a, _)| *a == k).map(|(_, v)| v.to_string())
    };
    let cfg = ServiceConfig::from_lookup(env(&[("GAZE_PORT", "9001"), ("GAZE_QUEUE_DEPTH", "3"), ("GAZE_MODEL_PATH", "m.safetensors")])).unwrap();
    assert_eq!(cfg.port, 9001);
    assert_eq!(cfg.queue_depth, 3);
    assert_eq!(cfg.model_path.unwrap().to_str(), Some("m.safetensors"));
    assert_eq!(ServiceConfig::from_lookup(env(&[])).unwrap().port, 8080);
    assert!(ServiceConfig::from_lookup(env(&[("GAZE_PORT", "x")])).unwrap_err().contains("GAZE_PORT"));
    assert!(ServiceConfig::from_lookup(env(&[("GAZE_QUEUE_DEPTH", "0")])).is_err());
}
