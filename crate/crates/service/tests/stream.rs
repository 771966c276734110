use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use futures::{SinkExt, StreamExt};
use gaze_core::geometry::LandmarkSet;
use gaze_core::GazeError;
use gaze_service::{close_code, router, AppState, GazePredictor, ServiceConfig};
use image::RgbImage;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

struct Stub {
    delay: Duration,
}

impl GazePredictor for Stub {
    fn predict(&self, image: &RgbImage, _: Option<&LandmarkSet>) -> Result<[f64; 2], GazeError> {
        std::thread::sleep(self.delay);
        Ok([image.width() as f64, image.height() as f64])
    }
    fn fingerprint(&self) -> String {
        "stub".into()
    }
    fn info(&self) -> Value {
        json!({})
    }
}

fn frame(seq: u64) -> String {
    let img = RgbImage::from_pixel(6, 4, image::Rgb([10, 20, 30]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    let b = base64::engine::general_purpose::STANDARD.encode(out.into_inner());
    json!({"seq": seq, "ts": 1000.0 + seq as f64, "image": b}).to_string()
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(cfg: ServiceConfig, delay: Duration) -> Ws {
    let app = router(AppState::with_model(&cfg, Arc::new(Stub { delay })));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/stream")).await.unwrap();
    ws
}

/// Next JSON text message, skipping control frames.
async fn next_json(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

#[tokio::test]
async fn ten_frames_give_ordered_responses() {
    let mut ws = connect(ServiceConfig::default(), Duration::from_millis(2)).await;
    for s in 0..10 {
        ws.send(Message::Text(frame(s).into())).await.unwrap();
    }
    let mut seqs = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    while seqs.last() != Some(&9) {
        let v = next_json(&mut ws).await;
        assert_eq!(v["x_cm"], 6.0);
        assert_eq!(v["y_cm"], 4.0);
        assert!(v["ms"].as_f64().unwrap() >= 0.0);
        let ts = v["ts"].as_f64().unwrap();
        assert!(ts > last_ts);
        last_ts = ts;
        assert_eq!(ts, 1000.0 + v["seq"].as_f64().unwrap());
        seqs.push(v["seq"].as_u64().unwrap());
    }
    assert!(seqs.len() <= 10);
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
}

#[tokio::test]
async fn burst_drops_frames_but_answers_newest() {
    let mut ws = connect(ServiceConfig::default(), Duration::from_millis(40)).await;
    let n = 30;
    for s in 0..n {
        ws.send(Message::Text(frame(s).into())).await.unwrap();
    }
    let mut seqs = Vec::new();
    while seqs.last() != Some(&(n - 1)) {
        seqs.push(next_json(&mut ws).await["seq"].as_u64().unwrap());
    }
    assert!(seqs.len() < n as usize, "no frame was dropped: {seqs:?}");
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
}

#[tokio::test]
async fn idle_session_receives_keepalive_pings() {
    let cfg = ServiceConfig {
        keepalive: Duration::from_millis(200),
        ..ServiceConfig::default()
    };
    let mut ws = connect(cfg, Duration::ZERO).await;
    let mut pings = 0;
    let deadline = tokio::time::Instant::now() + Duration::from_millis(900);
    while let Ok(Some(msg)) = tokio::time::timeout_at(deadline, ws.next()).await {
        if let Message::Ping(_) = msg.unwrap() {
            pings += 1;
        }
    }
    assert!(pings >= 2, "{pings} pings");
    // The session is still usable after idling.
    ws.send(Message::Text(frame(1).into())).await.unwrap();
    assert_eq!(next_json(&mut ws).await["seq"], 1);
}

async fn expect_close(ws: &mut Ws, code: u16) {
    loop {
        match tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap() {
            Some(Ok(Message::Close(Some(f)))) => {
                assert_eq!(u16::from(f.code), code, "{}", f.reason);
                assert!(!f.reason.is_empty());
                return;
            }
            Some(Ok(Message::Close(None))) | None => panic!("closed without a code"),
            Some(Ok(_)) => continue,
            Some(Err(e)) => panic!("{e}"),
        }
    }
}

#[tokio::test]
async fn protocol_violations_close_with_codes() {
    let mut ws = connect(ServiceConfig::default(), Duration::ZERO).await;
    ws.send(Message::Text("not json".into())).await.unwrap();
    expect_close(&mut ws, close_code::POLICY).await;

    let mut ws = connect(ServiceConfig::default(), Duration::ZERO).await;
    ws.send(Message::Binary(vec![1u8, 2, 3].into())).await.unwrap();
    expect_close(&mut ws, close_code::UNSUPPORTED).await;

    let mut ws = connect(ServiceConfig::default(), Duration::ZERO).await;
    ws.send(Message::Text(frame(5).into())).await.unwrap();
    assert_eq!(next_json(&mut ws).await["seq"], 5);
    ws.send(Message::Text(frame(5).into())).await.unwrap();
    expect_close(&mut ws, close_code::POLICY).await;
}

#[tokio::test]
async fn bad_image_in_stream_is_answered_with_error() {
    let mut ws = connect(ServiceConfig::default(), Duration::ZERO).await;
    ws.send(Message::Text(json!({"seq": 1, "ts": 2.0, "image": "@@"}).to_string().into())).await.unwrap();
    let v = next_json(&mut ws).await;
    assert_eq!(v["seq"], 1);
    assert_eq!(v["error"]["code"], "undecodable_image");
}
