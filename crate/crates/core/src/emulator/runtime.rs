use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::net::UdpSocket;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::{Instant, MissedTickBehavior};

use super::state::{ApState, RejectReason, Verdict};
use super::{generate_frame, EmulatorConfig, EmulatorConfigError};
use crate::record::unix_micros_now;
use crate::wire::encode_csi_frame;

const MAX_COMMAND_DATAGRAM: usize = 2048;
const EVENT_LOG_LIMIT: usize = 10_000;

/// Structured emulator event, serialized as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EmulatorEvent {
    CommandAccepted {
        at_us: u64,
        from: SocketAddrV4,
        cmd_type: u8,
        phase: super::ApPhase,
        reporting: bool,
    },
    CommandRejected {
        at_us: u64,
        from: SocketAddrV4,
        cmd_type: u8,
        #[serde(flatten)]
        reason: RejectReason,
    },
    DatagramDropped {
        at_us: u64,
        from: SocketAddrV4,
        len: usize,
        error: String,
    },
    Rebooted {
        at_us: u64,
    },
}

impl EmulatorEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// Arrival of one datagram on the command port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandArrival {
    /// Time since the emulator started.
    pub at: Duration,
    pub from: SocketAddrV4,
    /// `None` if the datagram did not decode.
    pub cmd_type: Option<u8>,
}

enum Control {
    Reboot(oneshot::Sender<()>),
}

struct Shared {
    started: Instant,
    last_sender: Mutex<Option<Ipv4Addr>>,
    arrivals: Mutex<Vec<CommandArrival>>,
    events: Mutex<Vec<EmulatorEvent>>,
    event_tx: broadcast::Sender<EmulatorEvent>,
    frames_sent: AtomicU64,
    dropped: AtomicU64,
    rejected: AtomicU64,
}

impl Shared {
    fn emit(&self, event: EmulatorEvent) {
        tracing::info!(target: "zcsi::emulator", "{}", event.to_json_line());
        let mut log = self.events.lock().expect("event log poisoned");
        if log.len() == EVENT_LOG_LIMIT {
            log.remove(0);
        }
        log.push(event.clone());
        drop(log);
        let _ = self.event_tx.send(event);
    }
}

pub struct Emulator;

impl Emulator {
    /// Binds the command and report sockets and starts serving.
    pub async fn spawn(config: EmulatorConfig) -> io::Result<EmulatorHandle> {
        config.validate().map_err(|e: EmulatorConfigError| {
            io::Error::new(io::ErrorKind::InvalidInput, e.to_string())
        })?;
        let command_socket =
            UdpSocket::bind(SocketAddrV4::new(config.bind_address, config.command_port)).await?;
        let report_socket =
            UdpSocket::bind(SocketAddrV4::new(config.bind_address, config.report_source_port)).await?;
        let command_addr = v4(command_socket.local_addr()?);
        let report_addr = v4(report_socket.local_addr()?);

        let (event_tx, _) = broadcast::channel(1024);
        let shared = Arc::new(Shared {
            started: Instant::now(),
            last_sender: Mutex::new(None),
            arrivals: Mutex::new(Vec::new()),
            events: Mutex::new(Vec::new()),
            event_tx,
            frames_sent: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        });
        let (state_tx, state_rx) = watch::channel(ApState::booted());
        let (control_tx, control_rx) = mpsc::channel(8);
        let config = Arc::new(config);

        let commands = tokio::spawn(command_loop(
            command_socket,
            state_tx,
            control_rx,
            config.clone(),
            shared.clone(),
        ));
        let generator = tokio::spawn(generator_loop(
            report_socket,
            state_rx.clone(),
            config.clone(),
            shared.clone(),
        ));

        Ok(EmulatorHandle {
            command_addr,
            report_addr,
            state_rx,
            control_tx,
            shared,
            tasks: vec![commands, generator],
        })
    }
}

fn v4(addr: SocketAddr) -> SocketAddrV4 {
    match addr {
        SocketAddr::V4(a) => a,
        SocketAddr::V6(a) => SocketAddrV4::new(
            a.ip().to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED),
            a.port(),
        ),
    }
}

/// Sole writer of the AP state.
async fn command_loop(
    socket: UdpSocket,
    state_tx: watch::Sender<ApState>,
    mut control_rx: mpsc::Receiver<Control>,
    config: Arc<EmulatorConfig>,
    shared: Arc<Shared>,
) {
    let mut buf = vec![0u8; MAX_COMMAND_DATAGRAM];
    loop {
        tokio::select! {
            received = socket.recv_from(&mut buf) => {
                let (len, from) = match received {
                    Ok(r) => r,
                    Err(e) => {
                        tracing::warn!("command socket receive failed: {e}");
                        continue;
                    }
                };
                let from = v4(from);
                let at = shared.started.elapsed();
                let mut outcome = None;
                state_tx.send_modify(|state| {
                    outcome = Some((state.handle_datagram(&buf[..len], config.strict_ordering), state.clone()));
                });
                let (outcome, state) = outcome.expect("send_modify runs the closure");
                let at_us = unix_micros_now();
                let cmd_type = match &outcome.verdict {
                    Verdict::Accepted(cmd) => {
                        *shared.last_sender.lock().expect("poisoned") = Some(*from.ip());
                        shared.emit(EmulatorEvent::CommandAccepted {
                            at_us,
                            from,
                            cmd_type: cmd.cmd_type,
                            phase: state.phase,
                            reporting: state.reporting,
                        });
                        Some(cmd.cmd_type)
                    }
                    Verdict::Rejected { command, reason } => {
                        *shared.last_sender.lock().expect("poisoned") = Some(*from.ip());
                        shared.rejected.fetch_add(1, Ordering::Relaxed);
                        shared.emit(EmulatorEvent::CommandRejected {
                            at_us,
                            from,
                            cmd_type: command.cmd_type,
                            reason: reason.clone(),
                        });
                        Some(command.cmd_type)
                    }
                    Verdict::Dropped(err) => {
                        shared.dropped.fetch_add(1, Ordering::Relaxed);
                        shared.emit(EmulatorEvent::DatagramDropped {
                            at_us,
                            from,
                            len,
                            error: err.to_string(),
                        });
                        None
                    }
                };
                shared
                    .arrivals
                    .lock()
                    .expect("poisoned")
                    .push(CommandArrival { at, from, cmd_type });
                if let Some(reply) = outcome.reply {
                    if let Err(e) = socket.send_to(&reply, SocketAddr::V4(from)).await {
                        tracing::warn!("reply to {from} failed: {e}");
                    }
                }
            }
            control = control_rx.recv() => match control {
                Some(Control::Reboot(ack)) => {
                    state_tx.send_modify(ApState::reboot);
                    shared.emit(EmulatorEvent::Rebooted { at_us: unix_micros_now() });
                    let _ = ack.send(());
                }
                None => break,
            },
        }
    }
}

async fn generator_loop(
    socket: UdpSocket,
    state_rx: watch::Receiver<ApState>,
    config: Arc<EmulatorConfig>,
    shared: Arc<Shared>,
) {
    let period = Duration::from_secs_f64(1.0 / config.frame_rate_hz);
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let mut tick: u64 = 0;
    loop {
        ticker.tick().await;
        let state = state_rx.borrow().clone();
        if !state.reporting {
            continue;
        }
        let target_ip = state
            .target_ip
            .or(config.default_target)
            .or(*shared.last_sender.lock().expect("poisoned"));
        let Some(target_ip) = target_ip else {
            continue;
        };
        let target = SocketAddrV4::new(target_ip, config.report_target_port);
        let now_us = unix_micros_now();
        for idx in 0..config.stations.len() {
            let Some(frame) = generate_frame(&config, &state, idx, tick, now_us) else {
                continue;
            };
            let raw = encode_csi_frame(&frame).expect("generated frames are valid");
            match socket.send_to(&raw, SocketAddr::V4(target)).await {
                Ok(_) => {
                    shared.frames_sent.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => tracing::debug!("report to {target} failed: {e}"),
            }
        }
        tick += 1;
    }
}

/// Control and observation surface of a running emulator.
pub struct EmulatorHandle {
    command_addr: SocketAddrV4,
    report_addr: SocketAddrV4,
    state_rx: watch::Receiver<ApState>,
    control_tx: mpsc::Sender<Control>,
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl EmulatorHandle {
    pub fn command_addr(&self) -> SocketAddrV4 {
        self.command_addr
    }

    pub fn report_source_addr(&self) -> SocketAddrV4 {
        self.report_addr
    }

    /// Reference instant for [`CommandArrival::at`].
    pub fn started_at(&self) -> Instant {
        self.shared.started
    }

    pub fn state(&self) -> ApState {
        self.state_rx.borrow().clone()
    }

    pub async fn reboot(&self) {
        let (ack_tx, ack_rx) = oneshot::channel();
        if self.control_tx.send(Control::Reboot(ack_tx)).await.is_ok() {
            let _ = ack_rx.await;
        }
    }

    pub fn subscribe_events(&self) -> broadcast::Receiver<EmulatorEvent> {
        self.shared.event_tx.subscribe()
    }

    pub fn events(&self) -> Vec<EmulatorEvent> {
        self.shared.events.lock().expect("poisoned").clone()
    }

    pub fn arrivals(&self) -> Vec<CommandArrival> {
        self.shared.arrivals.lock().expect("poisoned").clone()
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames_sent.load(Ordering::Relaxed)
    }

    pub fn dropped_datagrams(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    pub fn rejected_commands(&self) -> u64 {
        self.shared.rejected.load(Ordering::Relaxed)
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for EmulatorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
