#![allow(dead_code)]

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::net::UdpSocket;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use zcsi_core::collector::{Collector, CollectorConfig, CollectorHandle};
use zcsi_core::controller::{Controller, ControllerConfig};
use zcsi_core::emulator::{ChannelModel, Emulator, EmulatorConfig, EmulatorHandle, StationConfig};
use zcsi_core::wire::{Bandwidth, MacAddr};

pub const LOCALHOST: Ipv4Addr = Ipv4Addr::LOCALHOST;

/// UDP listener that records every datagram with its arrival instant.
pub struct CaptureStub {
    pub addr: SocketAddrV4,
    pub received: Arc<Mutex<Vec<(Instant, Vec<u8>)>>>,
    task: JoinHandle<()>,
}

impl CaptureStub {
    pub async fn start() -> Self {
        Self::start_with_reply(None).await
    }

    /// Answers every datagram with `reply`, if given.
    pub async fn start_with_reply(reply: Option<Vec<u8>>) -> Self {
        let socket = UdpSocket::bind(SocketAddrV4::new(LOCALHOST, 0)).await.unwrap();
        let addr = match socket.local_addr().unwrap() {
            SocketAddr::V4(a) => a,
            _ => unreachable!(),
        };
        let received = Arc::new(Mutex::new(Vec::new()));
        let sink = received.clone();
        let task = tokio::spawn(async move {
            let mut buf = vec![0u8; 65_536];
            loop {
                let Ok((n, from)) = socket.recv_from(&mut buf).await else {
                    continue;
                };
                sink.lock().unwrap().push((Instant::now(), buf[..n].to_vec()));
                if let Some(r) = &reply {
                    let _ = socket.send_to(r, from).await;
                }
            }
        });
        Self { addr, received, task }
    }

    pub fn datagrams(&self) -> Vec<Vec<u8>> {
        self.received.lock().unwrap().iter().map(|(_, d)| d.clone()).collect()
    }

    pub fn cmd_types(&self) -> Vec<u8> {
        self.datagrams().iter().map(|d| d[8]).collect()
    }

    pub fn gaps(&self) -> Vec<Duration> {
        let rx = self.received.lock().unwrap();
        rx.windows(2).map(|w| w[1].0 - w[0].0).collect()
    }
}

impl Drop for CaptureStub {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub fn station(last: u8, bw: Bandwidth, mcs: i16) -> StationConfig {
    StationConfig::new(MacAddr([0x02, 0, 0, 0, 0, last]), bw, mcs, vec![-40, -43, -47])
}

pub fn emulator_config(stations: Vec<StationConfig>, report_port: u16, rate: f64) -> EmulatorConfig {
    EmulatorConfig {
        bind_address: LOCALHOST,
        command_port: 0,
        report_source_port: 0,
        report_target_port: report_port,
        stations,
        frame_rate_hz: rate,
        channel: ChannelModel::default(),
        rng_seed: 42,
        ..Default::default()
    }
}

pub fn collector_config() -> CollectorConfig {
    CollectorConfig {
        bind_address: LOCALHOST,
        listen_port: 0,
        ..Default::default()
    }
}

pub struct Loopback {
    pub emulator: EmulatorHandle,
    pub collector: CollectorHandle,
    pub controller: Controller,
}

/// Collector first (to learn its port), then an emulator reporting to it,
/// then a controller pointed at the emulator.
pub async fn loopback(stations: Vec<StationConfig>, rate: f64, collector: CollectorConfig) -> Loopback {
    let collector = Collector::spawn(collector).await.unwrap();
    let emulator = Emulator::spawn(emulator_config(stations, collector.local_addr().port(), rate))
        .await
        .unwrap();
    let controller = Controller::new(controller_config(emulator.command_addr())).await.unwrap();
    Loopback {
        emulator,
        collector,
        controller,
    }
}

pub fn controller_config(ap: SocketAddrV4) -> ControllerConfig {
    let mut cfg = ControllerConfig::new(*ap.ip());
    cfg.command_port = ap.port();
    cfg
}

pub async fn wait_for(mut cond: impl FnMut() -> bool, limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    cond()
}
