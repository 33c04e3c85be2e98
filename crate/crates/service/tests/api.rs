use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use futures_util::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::Message;
use zcsi_core::collector::{Collector, CollectorConfig, CollectorHandle};
use zcsi_core::emulator::{Emulator, EmulatorConfig, EmulatorHandle, StationConfig};
use zcsi_core::wire::{Bandwidth, MacAddr};
use zcsi_service::{AppState, FrameEvent, ServiceConfig, MAX_PLOT_POINTS};

const LOCALHOST: Ipv4Addr = Ipv4Addr::LOCALHOST;

struct Rig {
    base: String,
    ws: String,
    http: reqwest::Client,
    collector: Arc<CollectorHandle>,
    emulator: EmulatorHandle,
}

async fn rig(stations: Vec<StationConfig>, rate: f64) -> Rig {
    let collector = Arc::new(
        Collector::spawn(CollectorConfig {
            bind_address: LOCALHOST,
            listen_port: 0,
            ..Default::default()
        })
        .await
        .unwrap(),
    );
    let emulator = Emulator::spawn(EmulatorConfig {
        bind_address: LOCALHOST,
        command_port: 0,
        report_source_port: 0,
        report_target_port: collector.local_addr().port(),
        stations,
        frame_rate_hz: rate,
        ..Default::default()
    })
    .await
    .unwrap();
    let mut config = ServiceConfig::default();
    config.controller.command_port = emulator.command_addr().port();
    let state = AppState::new(config, collector.clone());
    let (addr, _task) = zcsi_service::spawn(SocketAddr::from((LOCALHOST, 0)), state).await.unwrap();
    Rig {
        base: format!("http://{addr}/api"),
        ws: format!("ws://{addr}/ws/csi"),
        http: reqwest::Client::new(),
        collector,
        emulator,
    }
}

fn station(last: u8, bw: Bandwidth, mcs: i16) -> StationConfig {
    StationConfig::new(MacAddr([0x02, 0, 0, 0, 0, last]), bw, mcs, vec![-40, -45])
}

fn session(band: &str) -> Value {
    json!({ "band": band, "report_target_ip": "127.0.0.1", "ap_address": "127.0.0.1" })
}

impl Rig {
    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(body).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn delete_session(&self) -> (StatusCode, Value) {
        let r = self.http.delete(format!("{}/session", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_empty_collector() {
    let rig = rig(vec![station(1, Bandwidth::Bw20, 3)], 10.0).await;
    let (status, health) = rig.get("/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    let (status, frames) = rig.get("/frames/latest?n=5").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(frames, json!([]));
    let (status, stats) = rig.get("/stats").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stats, serde_json::to_value(rig.collector.stats()).unwrap());

    // versioned prefix serves the same routes
    let r = rig.http.get(rig.base.replace("/api", "/api/v1/health")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let (status, _) = rig.get("/frames/latest?n=abc").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn session_lifecycle_and_band_lock() {
    let rig = rig(vec![station(1, Bandwidth::Bw40, 5)], 50.0).await;
    let (status, body) = rig.post("/session", &session("5g")).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["phase"], "reporting");
    assert_eq!(body["locked_band"], "5g");

    let deadline = Instant::now() + Duration::from_secs(2);
    let mut total = 0;
    while Instant::now() < deadline && total < 10 {
        tokio::time::sleep(Duration::from_millis(50)).await;
        total = rig.get("/stats").await.1["total_frames"].as_u64().unwrap();
    }
    assert!(total >= 10, "total_frames {total}");

    let (_, frames) = rig.get("/frames/latest?n=3").await;
    let frames: Vec<FrameEvent> = serde_json::from_value(frames).unwrap();
    assert_eq!(frames.len(), 3);
    for f in &frames {
        assert_eq!(f.bw_mhz, 40);
        assert_eq!(f.mcs, 5);
        assert_eq!(f.magnitude.len(), 128);
        assert!(f.i.is_none());
    }
    let (_, with_iq) = rig.get("/frames/latest?n=1&iq=true").await;
    assert_eq!(with_iq[0]["i"].as_array().unwrap().len(), 128);

    let (status, body) = rig.post("/session", &session("5g")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["reason"], "invalid_phase");

    let (status, body) = rig.delete_session().await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["phase"], "stopped");

    let (status, body) = rig.post("/session", &session("2.4g")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["reason"], "band_locked");

    rig.emulator.reboot().await;
    let (status, body) = rig.post("/session/reset", &json!({ "ap_address": "127.0.0.1" })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["phase"], "idle");
    let (status, body) = rig.post("/session", &session("2.4g")).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["locked_band"], "2.4g");
    assert_eq!(rig.get("/session").await.1["phase"], "reporting");
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_requests_are_400() {
    let rig = rig(vec![station(1, Bandwidth::Bw20, 3)], 10.0).await;
    let mut bad_mac = session("5g");
    bad_mac["sta_filters"] = json!(["01:02:03:04:05"]);
    let mut too_many = session("5g");
    too_many["sta_filters"] = json!(vec!["02:00:00:00:00:01"; 6]);
    let mut big_frame_type = session("5g");
    big_frame_type["frame_type"] = json!(300);
    for body in [bad_mac, too_many, big_frame_type, session("6g"), json!({})] {
        let (status, reply) = rig.post("/session", &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {reply}");
        assert_eq!(reply["reason"], "invalid_request");
    }
    let r = rig
        .http
        .post(format!("{}/session", rig.base))
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert!(rig.emulator.arrivals().is_empty());

    let (status, body) = rig.delete_session().await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["reason"], "invalid_phase");
}

#[tokio::test(flavor = "multi_thread")]
async fn transport_failure_is_502() {
    let rig = rig(vec![station(1, Bandwidth::Bw20, 3)], 10.0).await;
    // sending to the broadcast address without SO_BROADCAST fails locally
    let mut body = session("5g");
    body["ap_address"] = json!("255.255.255.255");
    let (status, reply) = rig.post("/session", &body).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{reply}");
    assert_eq!(reply["reason"], "transport");
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_is_rate_capped_and_drops_excess() {
    // 4 stations at 100 Hz: 400 frames/s against a 30 events/s cap
    let stations = (1..=4).map(|i| station(i, Bandwidth::Bw160, i as i16)).collect();
    let rig = rig(stations, 100.0).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&rig.ws).await.unwrap();
    let (status, _) = rig.post("/session", &session("5g")).await;
    assert_eq!(status, StatusCode::OK);

    // discard whatever queued up while the session was being configured
    let drain_until = Instant::now() + Duration::from_millis(300);
    while let Ok(Some(_)) = tokio::time::timeout_at(drain_until, ws.next()).await {}

    let mut events = Vec::new();
    let window = Duration::from_secs(1);
    let started = Instant::now();
    while let Ok(Some(msg)) = tokio::time::timeout_at(started + window, ws.next()).await {
        if let Message::Text(text) = msg.unwrap() {
            events.push(serde_json::from_str::<FrameEvent>(&text).unwrap());
        }
    }
    assert!(events.len() >= 20, "only {} events", events.len());
    assert!(events.len() <= 31, "{} events in 1 s", events.len());
    for e in &events {
        assert_eq!(e.csi_cnt, 512);
        assert!(e.magnitude.len() <= MAX_PLOT_POINTS);
        assert_eq!(e.magnitude.len(), e.phase.len());
    }
    assert!(events.windows(2).all(|w| w[0].received_at_us <= w[1].received_at_us));

    // a client that stops reading never stalls the collector
    let before = rig.collector.counters().accepted;
    tokio::time::sleep(Duration::from_millis(500)).await;
    assert!(rig.collector.counters().accepted > before + 100);
    let (_, health) = rig.get("/health").await;
    assert_eq!(health["stream"]["clients"], 1);
    assert!(health["stream"]["events_dropped"].as_u64().unwrap() > 100);
    drop(ws);
}

#[tokio::test(flavor = "multi_thread")]
async fn versioned_stream_with_iq() {
    let rig = rig(vec![station(1, Bandwidth::Bw20, 2)], 50.0).await;
    let url = rig.ws.replace("/ws/csi", "/api/v1/ws/csi?iq=true");
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    rig.post("/session", &session("5g")).await;
    let msg = tokio::time::timeout(Duration::from_secs(3), ws.next()).await.unwrap().unwrap().unwrap();
    let event: FrameEvent = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(event.i.unwrap().len(), 64);
    assert_eq!(event.peer_addr, MacAddr([0x02, 0, 0, 0, 0, 1]));
}
