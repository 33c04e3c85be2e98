//! Receives CSI reports, keeps a bounded window, persists and fans out.
//!
//! One receive task owns the socket. Subscribers read from a bounded
//! broadcast queue; a subscriber that falls behind loses its oldest
//! undelivered records and the loss is counted, so a slow reader never
//! blocks reception.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::{broadcast, oneshot};
use tokio::task::JoinHandle;

use crate::analysis::{StatsAccumulator, StatsSnapshot};
use crate::capture::CaptureWriter;
use crate::record::{unix_micros_now, CsiRecord};
use crate::wire::MacAddr;

pub const DEFAULT_LISTEN_PORT: u16 = 8023;
pub const DEFAULT_WINDOW_CAPACITY: usize = 4096;
pub const EXPECTED_SOURCE_PORT: u16 = 8024;
/// Receive buffer size; larger datagrams are truncated and fail to decode.
pub const MAX_DATAGRAM: usize = 8192;

/// Requested kernel receive buffer; CSI reports arrive in bursts of 4.3 KB datagrams.
pub const DEFAULT_RECV_BUFFER: usize = 4 << 20;

const FLUSH_IDLE: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("window_capacity must be positive")]
    ZeroCapacity,
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddrV4,
        #[source]
        source: io::Error,
    },
    #[error("cannot create capture file {path}: {source}")]
    CaptureCreate {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub bind_address: Ipv4Addr,
    pub listen_port: u16,
    pub window_capacity: usize,
    pub mac_allowlist: Option<HashSet<MacAddr>>,
    pub capture_path: Option<PathBuf>,
    /// Drop datagrams whose source port is not 8024.
    pub strict_source_port: bool,
    pub subscriber_queue: usize,
    /// SO_RCVBUF request; the kernel may clamp it.
    pub recv_buffer_bytes: usize,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            bind_address: Ipv4Addr::UNSPECIFIED,
            listen_port: DEFAULT_LISTEN_PORT,
            window_capacity: DEFAULT_WINDOW_CAPACITY,
            mac_allowlist: None,
            capture_path: None,
            strict_source_port: false,
            subscriber_queue: 256,
            recv_buffer_bytes: DEFAULT_RECV_BUFFER,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CollectorCounters {
    pub received: u64,
    pub accepted: u64,
    pub decode_errors: u64,
    pub filtered: u64,
    pub wrong_source_port: u64,
    pub subscriber_drops: u64,
}

struct Shared {
    window: RwLock<VecDeque<Arc<CsiRecord>>>,
    capacity: usize,
    stats: Mutex<StatsAccumulator>,
    received: AtomicU64,
    accepted: AtomicU64,
    filtered: AtomicU64,
    wrong_port: AtomicU64,
    subscriber_drops: Arc<AtomicU64>,
    capture_warning: Mutex<Option<String>>,
    tx: broadcast::Sender<Arc<CsiRecord>>,
}

pub struct Collector;

impl Collector {
    pub async fn spawn(config: CollectorConfig) -> Result<CollectorHandle, CollectorError> {
        if config.window_capacity == 0 {
            return Err(CollectorError::ZeroCapacity);
        }
        let addr = SocketAddrV4::new(config.bind_address, config.listen_port);
        let socket = bind_udp(addr, config.recv_buffer_bytes)
            .map_err(|source| CollectorError::Bind { addr, source })?;
        let local_addr = match socket.local_addr() {
            Ok(SocketAddr::V4(a)) => a,
            _ => addr,
        };
        let writer = match &config.capture_path {
            Some(path) => Some(CaptureWriter::create(path).map_err(|source| {
                CollectorError::CaptureCreate {
                    path: path.clone(),
                    source,
                }
            })?),
            None => None,
        };
        let (tx, _) = broadcast::channel(config.subscriber_queue.max(1));
        let shared = Arc::new(Shared {
            window: RwLock::new(VecDeque::with_capacity(config.window_capacity.min(65_536))),
            capacity: config.window_capacity,
            stats: Mutex::new(StatsAccumulator::new()),
            received: AtomicU64::new(0),
            accepted: AtomicU64::new(0),
            filtered: AtomicU64::new(0),
            wrong_port: AtomicU64::new(0),
            subscriber_drops: Arc::new(AtomicU64::new(0)),
            capture_warning: Mutex::new(None),
            tx,
        });
        let (stop_tx, stop_rx) = oneshot::channel();
        let task = tokio::spawn(receive_loop(socket, config, writer, shared.clone(), stop_rx));
        Ok(CollectorHandle {
            local_addr,
            shared,
            stop: Mutex::new(Some(stop_tx)),
            task: Mutex::new(Some(task)),
        })
    }
}

fn bind_udp(addr: SocketAddrV4, recv_buffer: usize) -> io::Result<UdpSocket> {
    let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    if recv_buffer > 0 {
        if let Err(e) = socket.set_recv_buffer_size(recv_buffer) {
            tracing::debug!("SO_RCVBUF {recv_buffer} not applied: {e}");
        }
    }
    socket.bind(&SocketAddr::V4(addr).into())?;
    socket.set_nonblocking(true)?;
    UdpSocket::from_std(socket.into())
}

async fn receive_loop(
    socket: UdpSocket,
    config: CollectorConfig,
    mut writer: Option<CaptureWriter<BufWriter<File>>>,
    shared: Arc<Shared>,
    mut stop: oneshot::Receiver<()>,
) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let mut dirty = false;
    loop {
        let received = tokio::select! {
            _ = &mut stop => break,
            r = tokio::time::timeout(FLUSH_IDLE, socket.recv_from(&mut buf)) => r,
        };
        let (len, from) = match received {
            Err(_) => {
                if dirty {
                    flush(&mut writer, &shared);
                    dirty = false;
                }
                continue;
            }
            Ok(Err(e)) => {
                tracing::debug!("collector receive error: {e}");
                continue;
            }
            Ok(Ok(r)) => r,
        };
        let received_at_us = unix_micros_now();
        shared.received.fetch_add(1, Ordering::Relaxed);
        let SocketAddr::V4(source) = from else {
            continue;
        };
        if config.strict_source_port && source.port() != EXPECTED_SOURCE_PORT {
            shared.wrong_port.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        let record = match CsiRecord::from_raw(received_at_us, source, buf[..len].to_vec()) {
            Ok(r) => r,
            Err(e) => {
                tracing::debug!("dropping {len}-byte datagram from {source}: {e}");
                shared.stats.lock().expect("poisoned").record_decode_error();
                continue;
            }
        };
        if let Some(allow) = &config.mac_allowlist {
            if !allow.contains(&record.frame.peer_addr) {
                shared.filtered.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        }

        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write_record(&record) {
                warn_capture(&shared, &e);
                writer = None;
            } else {
                dirty = true;
            }
        }

        let record = Arc::new(record);
        {
            let mut window = shared.window.write().expect("poisoned");
            if window.len() == shared.capacity {
                window.pop_front();
            }
            window.push_back(record.clone());
        }
        shared.stats.lock().expect("poisoned").accumulate(&record);
        shared.accepted.fetch_add(1, Ordering::Relaxed);
        let _ = shared.tx.send(record);
    }
    flush(&mut writer, &shared);
}

fn flush(writer: &mut Option<CaptureWriter<BufWriter<File>>>, shared: &Shared) {
    if let Some(w) = writer.as_mut() {
        if let Err(e) = w.flush() {
            warn_capture(shared, &e);
            *writer = None;
        }
    }
}

fn warn_capture(shared: &Shared, e: &io::Error) {
    let msg = format!("capture file write failed, continuing in memory only: {e}");
    tracing::warn!("{msg}");
    *shared.capture_warning.lock().expect("poisoned") = Some(msg);
}

/// A live feed of accepted records.
pub struct Subscription {
    rx: broadcast::Receiver<Arc<CsiRecord>>,
    drops: Arc<AtomicU64>,
    local_drops: u64,
}

impl Subscription {
    /// Next record, or `None` once the collector has shut down.
    pub async fn recv(&mut self) -> Option<Arc<CsiRecord>> {
        loop {
            match self.rx.recv().await {
                Ok(r) => return Some(r),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    self.local_drops += n;
                    self.drops.fetch_add(n, Ordering::Relaxed);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }

    /// Records this subscriber missed because it fell behind.
    pub fn dropped(&self) -> u64 {
        self.local_drops
    }
}

pub struct CollectorHandle {
    local_addr: SocketAddrV4,
    shared: Arc<Shared>,
    stop: Mutex<Option<oneshot::Sender<()>>>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl CollectorHandle {
    pub fn local_addr(&self) -> SocketAddrV4 {
        self.local_addr
    }

    pub fn subscribe(&self) -> Subscription {
        Subscription {
            rx: self.shared.tx.subscribe(),
            drops: self.shared.subscriber_drops.clone(),
            local_drops: 0,
        }
    }

    /// Copy of the retained window, oldest first.
    pub fn records(&self) -> Vec<Arc<CsiRecord>> {
        self.shared.window.read().expect("poisoned").iter().cloned().collect()
    }

    /// The newest `n` records, oldest first.
    pub fn latest(&self, n: usize) -> Vec<Arc<CsiRecord>> {
        let window = self.shared.window.read().expect("poisoned");
        let skip = window.len().saturating_sub(n);
        window.iter().skip(skip).cloned().collect()
    }

    pub fn window_len(&self) -> usize {
        self.shared.window.read().expect("poisoned").len()
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.shared.stats.lock().expect("poisoned").snapshot()
    }

    pub fn counters(&self) -> CollectorCounters {
        CollectorCounters {
            received: self.shared.received.load(Ordering::Relaxed),
            accepted: self.shared.accepted.load(Ordering::Relaxed),
            decode_errors: self.stats().decode_errors,
            filtered: self.shared.filtered.load(Ordering::Relaxed),
            wrong_source_port: self.shared.wrong_port.load(Ordering::Relaxed),
            subscriber_drops: self.shared.subscriber_drops.load(Ordering::Relaxed),
        }
    }

    /// Set once a capture write has failed; collection continues in memory.
    pub fn capture_warning(&self) -> Option<String> {
        self.shared.capture_warning.lock().expect("poisoned").clone()
    }

    /// Stops the receive task and flushes the capture file.
    pub async fn shutdown(&self) {
        if let Some(stop) = self.stop.lock().expect("poisoned").take() {
            let _ = stop.send(());
        }
        let task = self.task.lock().expect("poisoned").take();
        if let Some(task) = task {
            let _ = task.await;
        }
    }
}

impl Drop for CollectorHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.get_mut().expect("poisoned").take() {
            let _ = stop.send(());
        }
    }
}

/// Starts a collector and returns its handle together with a subscription
/// that sees every accepted record from the start.
pub async fn run_collector(
    config: CollectorConfig,
) -> Result<(CollectorHandle, Subscription), CollectorError> {
    let handle = Collector::spawn(config).await?;
    let sub = handle.subscribe();
    Ok((handle, sub))
}
