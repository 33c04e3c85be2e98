//! HTTP and WebSocket front end over a running collector and controller.
//!
//! Every route is served under both `/api` and `/api/v1`. The live stream is
//! at `/ws/csi` (and `/api/v1/ws/csi`).

mod event;

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tokio::time::MissedTickBehavior;
use zcsi_core::collector::CollectorHandle;
use zcsi_core::controller::{Controller, ControllerConfig, ControllerError, ControllerState, SessionPhase, SessionPlan};
use zcsi_core::wire::{Band, MacAddr, FRAME_TYPE_QOS_DATA, MAX_STA_FILTERS};

pub use event::{FrameEvent, MAX_PLOT_POINTS};

pub const DEFAULT_HTTP_PORT: u16 = 8080;
pub const DEFAULT_STREAM_RATE_HZ: f64 = 30.0;
const DEFAULT_LATEST: usize = 10;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Template for per-AP controllers; `ap_address` is replaced per request.
    pub controller: ControllerConfig,
    pub stream_rate_hz: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::new(Ipv4Addr::new(192, 168, 1, 1)),
            stream_rate_hz: DEFAULT_STREAM_RATE_HZ,
        }
    }
}

/// Body of `POST /api/session`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub band: Band,
    #[serde(default = "default_frame_type")]
    pub frame_type: u8,
    #[serde(default)]
    pub sta_filters: Vec<String>,
    pub report_target_ip: Ipv4Addr,
    pub ap_address: Ipv4Addr,
}

fn default_frame_type() -> u8 {
    FRAME_TYPE_QOS_DATA
}

impl SessionRequest {
    pub fn to_plan(&self) -> Result<SessionPlan, ApiError> {
        if self.sta_filters.len() > MAX_STA_FILTERS {
            return Err(ApiError::bad_request(format!(
                "{} STA filters given, at most {MAX_STA_FILTERS} supported",
                self.sta_filters.len()
            )));
        }
        let sta_filters = self
            .sta_filters
            .iter()
            .map(|s| s.parse::<MacAddr>().map_err(|e| ApiError::bad_request(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(SessionPlan {
            band: self.band,
            frame_type: self.frame_type,
            sta_filters,
            report_target_ip: self.report_target_ip,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStatus {
    pub ap_address: Option<Ipv4Addr>,
    pub phase: SessionPhase,
    pub locked_band: Option<Band>,
}

impl SessionStatus {
    fn of(ap: Ipv4Addr, state: ControllerState) -> Self {
        Self {
            ap_address: Some(ap),
            phase: state.phase,
            locked_band: state.locked_band,
        }
    }
}

/// JSON error body: `{"reason": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            reason: "invalid_request",
            message: message.into(),
        }
    }

    fn conflict(reason: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            reason,
            message: message.into(),
        }
    }
}

impl From<ControllerError> for ApiError {
    fn from(e: ControllerError) -> Self {
        let message = e.to_string();
        match e {
            ControllerError::BandLocked { .. } => Self::conflict("band_locked", message),
            ControllerError::Busy => Self::conflict("busy", message),
            ControllerError::InvalidPhase(_) => Self::conflict("invalid_phase", message),
            ControllerError::InvalidPlan(_) | ControllerError::InvalidConfig(_) => Self::bad_request(message),
            ControllerError::Transport { .. } => Self {
                status: StatusCode::BAD_GATEWAY,
                reason: "transport",
                message,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "reason": self.reason, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Default)]
struct Sessions {
    controllers: HashMap<Ipv4Addr, Arc<Controller>>,
    active: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounters {
    pub clients: usize,
    pub events_sent: u64,
    pub events_dropped: u64,
}

#[derive(Default)]
struct StreamStats {
    clients: AtomicUsize,
    sent: AtomicU64,
    dropped: AtomicU64,
}

struct Inner {
    config: ServiceConfig,
    collector: Arc<CollectorHandle>,
    sessions: Mutex<Sessions>,
    stream: StreamStats,
}

/// Shared state behind the router.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig, collector: Arc<CollectorHandle>) -> Self {
        Self(Arc::new(Inner {
            config,
            collector,
            sessions: Mutex::new(Sessions::default()),
            stream: StreamStats::default(),
        }))
    }

    pub fn stream_counters(&self) -> StreamCounters {
        let s = &self.0.stream;
        StreamCounters {
            clients: s.clients.load(Ordering::Relaxed),
            events_sent: s.sent.load(Ordering::Relaxed),
            events_dropped: s.dropped.load(Ordering::Relaxed),
        }
    }

    async fn controller_for(&self, sessions: &mut Sessions, ap: Ipv4Addr) -> Result<Arc<Controller>, ApiError> {
        if let Some(c) = sessions.controllers.get(&ap) {
            return Ok(c.clone());
        }
        let mut cfg = self.0.config.controller.clone();
        cfg.ap_address = ap;
        let c = Arc::new(Controller::new(cfg).await?);
        sessions.controllers.insert(ap, c.clone());
        Ok(c)
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/stats", get(stats))
        .route("/frames/latest", get(latest_frames))
        .route("/session", post(start_session).delete(stop_session).get(session_status))
        .route("/session/reset", post(reset_session))
        .route("/ws/csi", get(stream));
    Router::new()
        .nest("/api", api.clone())
        .nest("/api/v1", api)
        .route("/ws/csi", get(stream))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves in a background task.
pub async fn spawn(addr: SocketAddr, state: AppState) -> io::Result<(SocketAddr, tokio::task::JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(serve(listener, state, std::future::pending()));
    Ok((local, task))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let c = &state.0.collector;
    Json(serde_json::json!({
        "status": "ok",
        "collector": c.counters(),
        "window_len": c.window_len(),
        "capture_warning": c.capture_warning(),
        "stream": state.stream_counters(),
    }))
}

async fn stats(State(state): State<AppState>) -> Json<zcsi_core::analysis::StatsSnapshot> {
    Json(state.0.collector.stats())
}

#[derive(Debug, Deserialize)]
struct LatestQuery {
    n: Option<usize>,
    #[serde(default)]
    iq: bool,
}

async fn latest_frames(
    State(state): State<AppState>,
    query: Result<Query<LatestQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Vec<FrameEvent>>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let n = q.n.unwrap_or(DEFAULT_LATEST);
    let events = state
        .0
        .collector
        .latest(n)
        .iter()
        .map(|r| FrameEvent::from_record(r, q.iq))
        .collect();
    Ok(Json(events))
}

async fn start_session(State(state): State<AppState>, body: Bytes) -> Result<Json<SessionStatus>, ApiError> {
    let request: SessionRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let plan = request.to_plan()?;
    let mut sessions = state
        .0
        .sessions
        .try_lock()
        .map_err(|_| ApiError::conflict("busy", "another session operation is in progress"))?;
    if let Some(active) = sessions.active {
        let reporting = sessions.controllers[&active].state().phase == SessionPhase::Reporting;
        if reporting && active != request.ap_address {
            return Err(ApiError::conflict("busy", format!("a session with {active} is active")));
        }
    }
    let controller = state.controller_for(&mut sessions, request.ap_address).await?;
    let status = SessionStatus::of(request.ap_address, controller.start_session(&plan).await?);
    sessions.active = Some(request.ap_address);
    tracing::info!(ap = %request.ap_address, band = %plan.band, "session started");
    Ok(Json(status))
}

async fn stop_session(State(state): State<AppState>) -> Result<Json<SessionStatus>, ApiError> {
    let sessions = state
        .0
        .sessions
        .try_lock()
        .map_err(|_| ApiError::conflict("busy", "another session operation is in progress"))?;
    let ap = sessions
        .active
        .ok_or_else(|| ApiError::conflict("invalid_phase", "no session has been started"))?;
    let controller = sessions.controllers[&ap].clone();
    let stopped = controller.stop_session().await?;
    tracing::info!(ap = %ap, "session stopped");
    Ok(Json(SessionStatus::of(ap, stopped)))
}

async fn session_status(State(state): State<AppState>) -> Json<SessionStatus> {
    let sessions = state.0.sessions.lock().await;
    Json(match sessions.active {
        Some(ap) => SessionStatus::of(ap, sessions.controllers[&ap].state()),
        None => SessionStatus {
            ap_address: None,
            phase: SessionPhase::Idle,
            locked_band: None,
        },
    })
}

#[derive(Debug, Deserialize)]
struct ResetRequest {
    ap_address: Ipv4Addr,
}

/// Forgets the band lock for an AP that has been rebooted.
async fn reset_session(State(state): State<AppState>, body: Bytes) -> Result<Json<SessionStatus>, ApiError> {
    let request: ResetRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let sessions = state
        .0
        .sessions
        .try_lock()
        .map_err(|_| ApiError::conflict("busy", "another session operation is in progress"))?;
    let Some(controller) = sessions.controllers.get(&request.ap_address) else {
        return Ok(Json(SessionStatus::of(request.ap_address, ControllerState::default())));
    };
    controller.reset()?;
    Ok(Json(SessionStatus::of(request.ap_address, controller.state())))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    iq: bool,
}

async fn stream(
    State(state): State<AppState>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    ws.on_upgrade(move |socket| push_frames(socket, state, q.iq))
}

/// Sends at most one event per tick, always the newest; anything it
/// replaces counts as dropped.
async fn push_frames(socket: WebSocket, state: AppState, include_iq: bool) {
    let stats = &state.0.stream;
    stats.clients.fetch_add(1, Ordering::Relaxed);
    let (mut tx, mut rx) = socket.split();
    let mut frames = state.0.collector.subscribe();
    let mut lagged = 0;
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / state.0.config.stream_rate_hz));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut pending = None;
    loop {
        tokio::select! {
            record = frames.recv() => {
                let Some(record) = record else { break };
                if pending.replace(record).is_some() {
                    stats.dropped.fetch_add(1, Ordering::Relaxed);
                }
                let now_lagged = frames.dropped();
                stats.dropped.fetch_add(now_lagged - lagged, Ordering::Relaxed);
                lagged = now_lagged;
            }
            _ = ticker.tick() => {
                let Some(record) = pending.take() else { continue };
                let event = FrameEvent::from_record(&record, include_iq);
                let text = serde_json::to_string(&event).expect("event serializes");
                if tx.send(Message::Text(text)).await.is_err() {
                    break;
                }
                stats.sent.fetch_add(1, Ordering::Relaxed);
            }
            incoming = rx.next() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    stats.clients.fetch_sub(1, Ordering::Relaxed);
}
