//! Drives an AP through the CSI bring-up sequence over UDP.
//!
//! The sequence is `BandConfig(0x5)`, `CsiConfig(0x3)`, `ReportEnable(1)(0x1)`,
//! one `StaFilter(0x2)` per filtered MAC, then `ReportConfig(0x4)`. Consecutive
//! commands are spaced by at least the configured delay (500 ms floor). Once
//! a band has been configured it stays locked until the AP reboots.

use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::Instant;

use crate::wire::{encode_command, Band, CommandFrame, MacAddr, FRAME_TYPE_QOS_DATA, MAX_STA_FILTERS};

pub const DEFAULT_COMMAND_PORT: u16 = 8021;
pub const MIN_INTER_COMMAND_DELAY: Duration = Duration::from_millis(500);

/// Added to every pacing wait so receive-side timestamps stay above the floor.
const PACING_GUARD: Duration = Duration::from_millis(2);

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("band {locked} is locked until the AP reboots; cannot switch to {requested}")]
    BandLocked { locked: Band, requested: Band },
    #[error("another session operation is in progress")]
    Busy,
    #[error("operation not allowed in phase {0:?}")]
    InvalidPhase(SessionPhase),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("transport failure after reaching phase {phase:?}: {source}")]
    Transport {
        phase: SessionPhase,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControllerConfig {
    pub ap_address: Ipv4Addr,
    pub command_port: u16,
    pub inter_command_delay: Duration,
    pub availability_timeout: Duration,
    pub availability_retries: u32,
}

impl ControllerConfig {
    pub fn new(ap_address: Ipv4Addr) -> Self {
        Self {
            ap_address,
            command_port: DEFAULT_COMMAND_PORT,
            inter_command_delay: MIN_INTER_COMMAND_DELAY,
            availability_timeout: Duration::from_secs(2),
            availability_retries: 3,
        }
    }

    pub fn ap_endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ap_address, self.command_port)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.inter_command_delay < MIN_INTER_COMMAND_DELAY {
            return Err(ControllerError::InvalidConfig(format!(
                "inter_command_delay {:?} is below the 500 ms minimum",
                self.inter_command_delay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub band: Band,
    pub frame_type: u8,
    pub sta_filters: Vec<MacAddr>,
    pub report_target_ip: Ipv4Addr,
}

impl SessionPlan {
    pub fn new(band: Band, report_target_ip: Ipv4Addr) -> Self {
        Self {
            band,
            frame_type: FRAME_TYPE_QOS_DATA,
            sta_filters: Vec::new(),
            report_target_ip,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.sta_filters.len() > MAX_STA_FILTERS {
            return Err(ControllerError::InvalidPlan(format!(
                "{} STA filters given, at most {MAX_STA_FILTERS} supported",
                self.sta_filters.len()
            )));
        }
        Ok(())
    }

    /// The commands `start_session` sends, in order, with the phase each one reaches.
    pub fn commands(&self) -> Vec<(CommandFrame, SessionPhase)> {
        let mut seq = vec![
            (CommandFrame::band_config(self.band), SessionPhase::BandSet),
            (CommandFrame::csi_config(self.frame_type), SessionPhase::Configured),
            (CommandFrame::report_enable(true), SessionPhase::Enabled),
        ];
        seq.extend(
            self.sta_filters
                .iter()
                .map(|&mac| (CommandFrame::sta_filter(mac), SessionPhase::Filtered)),
        );
        seq.push((
            CommandFrame::report_config(self.report_target_ip),
            SessionPhase::Reporting,
        ));
        seq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Idle,
    BandSet,
    Configured,
    Enabled,
    Filtered,
    Reporting,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    pub phase: SessionPhase,
    pub locked_band: Option<Band>,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self {
            phase: SessionPhase::Idle,
            locked_band: None,
        }
    }
}

pub struct Controller {
    config: ControllerConfig,
    socket: UdpSocket,
    state: Mutex<ControllerState>,
    last_send: Mutex<Option<Instant>>,
    busy: AtomicBool,
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Controller {
    pub async fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        Self::with_state(config, ControllerState::default()).await
    }

    pub async fn with_state(
        config: ControllerConfig,
        state: ControllerState,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        let socket = UdpSocket::bind(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0))
            .await
            .map_err(|source| ControllerError::Transport {
                phase: state.phase,
                source,
            })?;
        Ok(Self {
            config,
            socket,
            state: Mutex::new(state),
            last_send: Mutex::new(None),
            busy: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> ControllerState {
        *self.state.lock().expect("controller state poisoned")
    }

    fn set_state(&self, f: impl FnOnce(&mut ControllerState)) {
        f(&mut self.state.lock().expect("controller state poisoned"));
    }

    fn acquire(&self) -> Result<BusyGuard<'_>, ControllerError> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| ControllerError::Busy)?;
        Ok(BusyGuard(&self.busy))
    }

    /// Forgets the band lock after the AP has been rebooted.
    pub fn reset(&self) -> Result<(), ControllerError> {
        let _guard = self.acquire()?;
        self.set_state(|s| *s = ControllerState::default());
        Ok(())
    }

    async fn paced_send(&self, frame: &CommandFrame) -> io::Result<()> {
        let due = self
            .last_send
            .lock()
            .expect("poisoned")
            .map(|t| t + self.config.inter_command_delay + PACING_GUARD);
        if let Some(due) = due {
            tokio::time::sleep_until(due).await;
        }
        let bytes = encode_command(frame).expect("controller builds well-typed commands");
        self.socket
            .send_to(&bytes, SocketAddr::V4(self.config.ap_endpoint()))
            .await?;
        *self.last_send.lock().expect("poisoned") = Some(Instant::now());
        Ok(())
    }

    /// Runs the full bring-up sequence for `plan`.
    ///
    /// On a transport failure the state keeps the last phase reached and the
    /// error reports it.
    pub async fn start_session(&self, plan: &SessionPlan) -> Result<ControllerState, ControllerError> {
        let _guard = self.acquire()?;
        plan.validate()?;
        let state = self.state();
        if state.phase == SessionPhase::Reporting {
            return Err(ControllerError::InvalidPhase(state.phase));
        }
        if let Some(locked) = state.locked_band {
            if locked != plan.band {
                return Err(ControllerError::BandLocked {
                    locked,
                    requested: plan.band,
                });
            }
        }

        for (command, phase) in plan.commands() {
            if let Err(source) = self.paced_send(&command).await {
                let reached = self.state().phase;
                return Err(ControllerError::Transport {
                    phase: reached,
                    source,
                });
            }
            self.set_state(|s| {
                s.phase = phase;
                if phase == SessionPhase::BandSet {
                    s.locked_band = Some(plan.band);
                }
            });
            // no filters: pass through Filtered without a send
            if phase == SessionPhase::Enabled && plan.sta_filters.is_empty() {
                self.set_state(|s| s.phase = SessionPhase::Filtered);
            }
        }
        Ok(self.state())
    }

    pub async fn stop_session(&self) -> Result<ControllerState, ControllerError> {
        let _guard = self.acquire()?;
        let phase = self.state().phase;
        if phase != SessionPhase::Reporting {
            return Err(ControllerError::InvalidPhase(phase));
        }
        self.paced_send(&CommandFrame::report_enable(false))
            .await
            .map_err(|source| ControllerError::Transport { phase, source })?;
        self.set_state(|s| s.phase = SessionPhase::Stopped);
        Ok(self.state())
    }

    /// Sends one command as-is, without pacing or state tracking.
    pub async fn send_raw(&self, frame: &CommandFrame) -> Result<(), ControllerError> {
        let bytes = encode_command(frame).map_err(|e| ControllerError::InvalidPlan(e.to_string()))?;
        self.socket
            .send_to(&bytes, SocketAddr::V4(self.config.ap_endpoint()))
            .await
            .map_err(|source| ControllerError::Transport {
                phase: self.state().phase,
                source,
            })?;
        Ok(())
    }

    pub async fn check_availability(&self) -> Result<bool, ControllerError> {
        check_availability(&self.config).await
    }
}

/// Sends CheckAvailability and waits for an `OK` reply from the AP,
/// retrying up to `availability_retries` times.
///
/// Returns `Ok(false)` when no `OK` arrives; socket failures are errors.
pub async fn check_availability(config: &ControllerConfig) -> Result<bool, ControllerError> {
    let transport = |source| ControllerError::Transport {
        phase: SessionPhase::Idle,
        source,
    };
    let socket = UdpSocket::bind(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0))
        .await
        .map_err(transport)?;
    let request = encode_command(&CommandFrame::check_availability()).expect("valid command");
    let ap = config.ap_endpoint();
    let mut buf = [0u8; 64];
    for _ in 0..config.availability_retries.max(1) {
        socket
            .send_to(&request, SocketAddr::V4(ap))
            .await
            .map_err(transport)?;
        let deadline = Instant::now() + config.availability_timeout;
        loop {
            let recv = tokio::time::timeout_at(deadline, socket.recv_from(&mut buf)).await;
            match recv {
                Err(_) => break,
                Ok(Ok((n, from))) => {
                    if from.ip() != std::net::IpAddr::V4(*ap.ip()) && !ap.ip().is_unspecified() {
                        continue;
                    }
                    if &buf[..n] == b"OK" {
                        return Ok(true);
                    }
                    // a reply that is not OK means "not ready"; try again
                    break;
                }
                // ICMP port-unreachable surfaces as ConnectionRefused on some hosts
                Ok(Err(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {
                    tokio::time::sleep_until(deadline).await;
                    break;
                }
                Ok(Err(e)) => return Err(transport(e)),
            }
        }
    }
    Ok(false)
}
