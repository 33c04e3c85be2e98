//! Software stand-in for the AX3000 access point.
//!
//! [`state`] holds the command state machine, [`channel`] the synthetic
//! channel, and [`runtime`] the UDP service that ties them together.

pub mod channel;
pub mod runtime;
pub mod state;

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{Bandwidth, CsiDataFrame, MacAddr, CHAIN_SLOTS, CSI_MAGIC_DEFAULT};

pub use channel::{ChannelError, ChannelKind, ChannelModel, Quantizer, Tap};
pub use runtime::{CommandArrival, Emulator, EmulatorEvent, EmulatorHandle};
pub use state::{ApPhase, ApState, CommandOutcome, RejectReason, Verdict};

pub const DEFAULT_COMMAND_PORT: u16 = 8021;
pub const DEFAULT_REPORT_PORT: u16 = 8023;
pub const DEFAULT_REPORT_SOURCE_PORT: u16 = 8024;

/// Largest per-frame RSSI deviation from the station baseline.
pub const RSSI_JITTER: i32 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmulatorConfigError {
    #[error("frame_rate_hz must be a positive number, got {0}")]
    BadFrameRate(f64),
    #[error("at least one station is required")]
    NoStations,
    #[error("station {mac} lists {count} rssi baselines, at most 16 allowed")]
    TooManyChains { mac: MacAddr, count: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// One synthetic STA whose PPDUs the emulated AP reports on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub mac: MacAddr,
    pub bandwidth: Bandwidth,
    pub mcs: i16,
    /// Per-chain RSSI baseline; a zero entry marks an unused chain.
    pub rssi: Vec<i32>,
    #[serde(default = "default_agc")]
    pub agc_gain: i8,
    #[serde(default)]
    pub phy_mode: u32,
    #[serde(default = "default_gi")]
    pub gi_type: i8,
    #[serde(default = "default_coding")]
    pub coding: i8,
    #[serde(default)]
    pub stbc: i8,
    #[serde(default)]
    pub dcm: i8,
}

fn default_agc() -> i8 {
    24
}

fn default_gi() -> i8 {
    1
}

fn default_coding() -> i8 {
    1
}

impl StationConfig {
    pub fn new(mac: MacAddr, bandwidth: Bandwidth, mcs: i16, rssi: Vec<i32>) -> Self {
        Self {
            mac,
            bandwidth,
            mcs,
            rssi,
            agc_gain: default_agc(),
            phy_mode: 0,
            gi_type: default_gi(),
            coding: default_coding(),
            stbc: 0,
            dcm: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmulatorConfig {
    pub bind_address: Ipv4Addr,
    pub command_port: u16,
    pub strict_ordering: bool,
    pub report_source_port: u16,
    pub report_target_port: u16,
    /// Report destination until a ReportConfig arrives. `None` means the
    /// address of the most recent command sender.
    pub default_target: Option<Ipv4Addr>,
    pub stations: Vec<StationConfig>,
    pub frame_rate_hz: f64,
    pub channel: ChannelModel,
    pub rng_seed: u64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            bind_address: Ipv4Addr::UNSPECIFIED,
            command_port: DEFAULT_COMMAND_PORT,
            strict_ordering: true,
            report_source_port: DEFAULT_REPORT_SOURCE_PORT,
            report_target_port: DEFAULT_REPORT_PORT,
            default_target: None,
            stations: vec![StationConfig::new(
                MacAddr([0x0a, 0x19, 0xc6, 0x51, 0x00, 0x12]),
                Bandwidth::Bw160,
                9,
                vec![-42, -45, -47],
            )],
            frame_rate_hz: 50.0,
            channel: ChannelModel::default(),
            rng_seed: 0,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self) -> Result<(), EmulatorConfigError> {
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(EmulatorConfigError::BadFrameRate(self.frame_rate_hz));
        }
        if self.stations.is_empty() {
            return Err(EmulatorConfigError::NoStations);
        }
        for s in &self.stations {
            if s.rssi.len() > CHAIN_SLOTS {
                return Err(EmulatorConfigError::TooManyChains {
                    mac: s.mac,
                    count: s.rssi.len(),
                });
            }
        }
        self.channel.validate()?;
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one (station, tick) pair, so frames do not depend on emission order.
fn frame_rng(seed: u64, station_index: usize, tick: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(tick ^ splitmix64(station_index as u64)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Builds the CSI report for `station` at generation tick `tick`.
///
/// Returns `None` when the AP is not reporting or the station is filtered out.
/// For a fixed config, station and tick the result is deterministic.
pub fn generate_frame(
    config: &EmulatorConfig,
    state: &ApState,
    station_index: usize,
    tick: u64,
    now_us: u64,
) -> Option<CsiDataFrame> {
    let station = config.stations.get(station_index)?;
    if !state.reporting || !state.admits(&station.mac) {
        return None;
    }
    Some(synthesize_frame(config, station_index, tick, now_us))
}

/// Frame synthesis without the reporting/filter precondition.
pub fn synthesize_frame(
    config: &EmulatorConfig,
    station_index: usize,
    tick: u64,
    now_us: u64,
) -> CsiDataFrame {
    let station = &config.stations[station_index];
    let mut rng = frame_rng(config.rng_seed, station_index, tick);
    let n = station.bandwidth.max_subcarriers();

    let mut frame = CsiDataFrame {
        magic: CSI_MAGIC_DEFAULT,
        vendor: 2,
        chip_id: 1,
        timestamp_us: now_us,
        bw: station.bandwidth.code(),
        phy_mode: station.phy_mode,
        peer_addr: station.mac,
        mcs: station.mcs,
        gi_type: station.gi_type,
        coding: station.coding,
        stbc: station.stbc,
        dcm: station.dcm,
        csi_cnt: n as i16,
        ..Default::default()
    };
    for (chain, &base) in station.rssi.iter().enumerate().take(CHAIN_SLOTS) {
        if base == 0 {
            continue;
        }
        let jittered = base + rng.gen_range(-RSSI_JITTER..=RSSI_JITTER);
        frame.rssi[chain] = if jittered == 0 { base } else { jittered };
        frame.agc_gain[chain] = station.agc_gain;
    }
    let (i, q) = config.channel.sample(n, &mut rng);
    frame.csi_i[..n].copy_from_slice(&i);
    frame.csi_q[..n].copy_from_slice(&q);
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::to_spectrum;
    use crate::wire::{decode_csi_frame, encode_csi_frame, CommandFrame, Band};

    fn reporting_state() -> ApState {
        let mut s = ApState::booted();
        for cmd in [
            CommandFrame::band_config(Band::Band5G),
            CommandFrame::csi_config(0x22),
            CommandFrame::report_enable(true),
        ] {
            s.handle_command(cmd, true);
        }
        s
    }

    fn config_with(channel: ChannelModel, bw: Bandwidth) -> EmulatorConfig {
        EmulatorConfig {
            stations: vec![StationConfig::new(MacAddr([2, 0, 0, 0, 0, 1]), bw, 7, vec![-40, -50])],
            channel,
            ..Default::default()
        }
    }

    #[test]
    fn identity_fields() {
        let cfg = EmulatorConfig::default();
        let f = generate_frame(&cfg, &reporting_state(), 0, 0, 123).unwrap();
        assert_eq!((f.vendor, f.chip_id), (2, 1));
        assert_eq!(f.timestamp_us, 123);
        assert_eq!(f.magic, 0xCAFE_0001);
        assert_eq!(f.bw, 3);
        assert_eq!(f.csi_cnt, 512);
        assert_eq!(f.mcs, 9);
        assert_eq!(f.peer_addr, cfg.stations[0].mac);
        let raw = encode_csi_frame(&f).unwrap();
        assert_eq!(decode_csi_frame(&raw).unwrap(), f);
    }

    #[test]
    fn rssi_jitter_stays_on_active_chains() {
        let cfg = config_with(ChannelModel::flat(10.0), Bandwidth::Bw20);
        for tick in 0..50 {
            let f = synthesize_frame(&cfg, 0, tick, 0);
            assert!((f.rssi[0] + 40).abs() <= RSSI_JITTER);
            assert!((f.rssi[1] + 50).abs() <= RSSI_JITTER);
            assert!(f.rssi[2..].iter().all(|&r| r == 0));
            assert_eq!(f.agc_gain[0], 24);
            assert_eq!(f.agc_gain[2], 0);
        }
    }

    #[test]
    fn not_reporting_or_filtered_yields_nothing() {
        let cfg = EmulatorConfig::default();
        assert!(generate_frame(&cfg, &ApState::booted(), 0, 0, 0).is_none());
        let mut s = reporting_state();
        s.handle_command(CommandFrame::sta_filter(MacAddr([9; 6])), true);
        assert!(generate_frame(&cfg, &s, 0, 0, 0).is_none());
        assert!(generate_frame(&cfg, &s, 5, 0, 0).is_none());
    }

    #[test]
    fn flat_gain_magnitudes_are_exact() {
        let cfg = config_with(ChannelModel::flat(1000.0), Bandwidth::Bw20);
        let f = synthesize_frame(&cfg, 0, 3, 0);
        let view = to_spectrum(&f).unwrap();
        assert_eq!(view.subcarrier_count, 64);
        assert!(view.magnitude.iter().all(|&m| m == 1000.0));
        assert!(f.csi_i[64..].iter().all(|&v| v == 0));
    }

    #[test]
    fn deterministic_per_seed_and_tick() {
        let cfg = EmulatorConfig::default();
        let a = synthesize_frame(&cfg, 0, 17, 5);
        let b = synthesize_frame(&cfg, 0, 17, 5);
        assert_eq!(a, b);
        let c = synthesize_frame(&cfg, 0, 18, 5);
        assert_ne!(a.csi_i, c.csi_i);
        let other_seed = EmulatorConfig {
            rng_seed: 1,
            ..cfg.clone()
        };
        assert_ne!(a.csi_i, synthesize_frame(&other_seed, 0, 17, 5).csi_i);
    }

    #[test]
    fn samples_fit_sixteen_bits() {
        let cfg = config_with(ChannelModel::flat(1e6).with_noise(1e5), Bandwidth::Bw160);
        let f = synthesize_frame(&cfg, 0, 0, 0);
        assert!(f
            .csi_i
            .iter()
            .chain(f.csi_q.iter())
            .all(|&v| (i16::MIN as i32..=i16::MAX as i32).contains(&v)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EmulatorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.frame_rate_hz = 0.0;
        assert!(matches!(cfg.validate(), Err(EmulatorConfigError::BadFrameRate(_))));
        cfg.frame_rate_hz = 10.0;
        cfg.stations.clear();
        assert_eq!(cfg.validate(), Err(EmulatorConfigError::NoStations));
    }
}
