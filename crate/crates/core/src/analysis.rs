//! Spectrum conversion and running statistics over received CSI.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::CsiRecord;
use crate::wire::{CsiDataFrame, CHAIN_SLOTS};

/// Sliding window used for the frame-rate estimate.
pub const RATE_WINDOW_US: u64 = 5_000_000;

/// Floor applied by [`magnitude_db`] to zero or tiny magnitudes.
pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("csi_cnt {0} outside 1..=512")]
    CsiCountOutOfRange(i16),
}

/// Complex per-subcarrier view of one CSI report.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumView {
    pub subcarrier_count: usize,
    pub complex_values: Vec<Complex64>,
    pub magnitude: Vec<f64>,
    /// atan2(Q, I), in (-pi, pi].
    pub phase_rad: Vec<f64>,
}

pub fn to_spectrum(frame: &CsiDataFrame) -> Result<SpectrumView, AnalysisError> {
    let n = frame
        .subcarrier_count()
        .ok_or(AnalysisError::CsiCountOutOfRange(frame.csi_cnt))?;
    let complex_values: Vec<Complex64> = frame.csi_i[..n]
        .iter()
        .zip(&frame.csi_q[..n])
        .map(|(&i, &q)| Complex64::new(i as f64, q as f64))
        .collect();
    let magnitude = complex_values.iter().map(|c| c.norm()).collect();
    let phase_rad = complex_values.iter().map(|c| c.im.atan2(c.re)).collect();
    Ok(SpectrumView {
        subcarrier_count: n,
        complex_values,
        magnitude,
        phase_rad,
    })
}

/// Removes 2*pi jumps between adjacent phase samples.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &p in phase {
        if let Some(prev) = prev {
            let delta = p - prev;
            if delta > PI {
                offset -= 2.0 * PI * ((delta + PI) / (2.0 * PI)).floor();
            } else if delta < -PI {
                offset += 2.0 * PI * ((-delta + PI) / (2.0 * PI)).floor();
            }
        }
        out.push(p + offset);
        prev = Some(p);
    }
    out
}

/// 20*log10(magnitude), floored at [`DB_FLOOR`].
pub fn magnitude_db(magnitude: &[f64]) -> Vec<f64> {
    magnitude
        .iter()
        .map(|&m| {
            if m > 0.0 {
                (20.0 * m.log10()).max(DB_FLOOR)
            } else {
                DB_FLOOR
            }
        })
        .collect()
}

/// Indices of at most `max_points` samples out of `len`, always including
/// both endpoints and spaced by the uniform real-valued stride
/// `(len - 1) / (max_points - 1)`, rounded to the nearest index.
pub fn decimation_indices(len: usize, max_points: usize) -> Vec<usize> {
    if max_points == 0 {
        return Vec::new();
    }
    if len <= max_points {
        return (0..len).collect();
    }
    if max_points == 1 {
        return vec![0];
    }
    let stride = (len - 1) as f64 / (max_points - 1) as f64;
    (0..max_points)
        .map(|k| ((k as f64 * stride).round() as usize).min(len - 1))
        .collect()
}

pub fn decimate<T: Copy>(values: &[T], max_points: usize) -> Vec<T> {
    decimation_indices(values.len(), max_points)
        .into_iter()
        .map(|i| values[i])
        .collect()
}

/// Writes one row per subcarrier: `subcarrier,i,q,magnitude,phase_rad`.
pub fn write_spectrum_csv(mut out: impl Write, view: &SpectrumView) -> io::Result<()> {
    writeln!(out, "subcarrier,i,q,magnitude,phase_rad")?;
    for (k, c) in view.complex_values.iter().enumerate() {
        writeln!(
            out,
            "{k},{},{},{},{}",
            c.re, c.im, view.magnitude[k], view.phase_rad[k]
        )?;
    }
    Ok(())
}

/// Point-in-time copy of the collector statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub total_frames: u64,
    pub frames_by_bandwidth: BTreeMap<u32, u64>,
    pub frames_by_mcs: BTreeMap<i16, u64>,
    pub avg_rssi_per_chain: Vec<f64>,
    pub frames_per_second: f64,
    pub decode_errors: u64,
}

impl Default for StatsSnapshot {
    fn default() -> Self {
        Self {
            total_frames: 0,
            frames_by_bandwidth: BTreeMap::new(),
            frames_by_mcs: BTreeMap::new(),
            avg_rssi_per_chain: vec![0.0; CHAIN_SLOTS],
            frames_per_second: 0.0,
            decode_errors: 0,
        }
    }
}

impl StatsSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }
}

/// Running counters behind [`StatsSnapshot`].
///
/// RSSI sums are kept as integers so the means do not depend on the order
/// in which frames arrive.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    total_frames: u64,
    frames_by_bandwidth: BTreeMap<u32, u64>,
    frames_by_mcs: BTreeMap<i16, u64>,
    rssi_sum: [i64; CHAIN_SLOTS],
    rssi_count: [u64; CHAIN_SLOTS],
    decode_errors: u64,
    latest_us: u64,
    recent: VecDeque<u64>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, record: &CsiRecord) {
        self.accumulate_frame(&record.frame, record.received_at_us);
    }

    pub fn accumulate_frame(&mut self, frame: &CsiDataFrame, received_at_us: u64) {
        self.total_frames += 1;
        *self.frames_by_bandwidth.entry(frame.bw).or_default() += 1;
        *self.frames_by_mcs.entry(frame.mcs).or_default() += 1;
        for (chain, &rssi) in frame.rssi.iter().enumerate() {
            if rssi != 0 {
                self.rssi_sum[chain] += rssi as i64;
                self.rssi_count[chain] += 1;
            }
        }

        self.latest_us = self.latest_us.max(received_at_us);
        self.recent.push_back(received_at_us);
        let cutoff = self.latest_us.saturating_sub(RATE_WINDOW_US);
        if self.recent.front().is_some_and(|&t| t < cutoff) {
            self.recent.retain(|&t| t >= cutoff);
        }
    }

    pub fn record_decode_error(&mut self) {
        self.decode_errors += 1;
    }

    /// Frames per second over the last [`RATE_WINDOW_US`]: the number of
    /// arrival intervals divided by the span they cover.
    fn frames_per_second(&self) -> f64 {
        if self.recent.len() < 2 {
            return 0.0;
        }
        let (lo, hi) = self
            .recent
            .iter()
            .fold((u64::MAX, 0), |(lo, hi), &t| (lo.min(t), hi.max(t)));
        if hi == lo {
            return 0.0;
        }
        (self.recent.len() - 1) as f64 / ((hi - lo) as f64 / 1e6)
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let avg_rssi_per_chain = self
            .rssi_sum
            .iter()
            .zip(&self.rssi_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s as f64 / c as f64 })
            .collect();
        StatsSnapshot {
            total_frames: self.total_frames,
            frames_by_bandwidth: self.frames_by_bandwidth.clone(),
            frames_by_mcs: self.frames_by_mcs.clone(),
            avg_rssi_per_chain,
            frames_per_second: self.frames_per_second(),
            decode_errors: self.decode_errors,
        }
    }
}

/// Folds a record into a snapshot-producing accumulator.
pub fn accumulate(stats: &mut StatsAccumulator, record: &CsiRecord) {
    stats.accumulate(record);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{Ipv4Addr, SocketAddrV4};

    fn frame_with(i: i32, q: i32, n: i16) -> CsiDataFrame {
        let mut f = CsiDataFrame {
            csi_cnt: n,
            ..Default::default()
        };
        for k in 0..n as usize {
            f.csi_i[k] = i;
            f.csi_q[k] = q;
        }
        f
    }

    fn record(frame: CsiDataFrame, at: u64) -> CsiRecord {
        CsiRecord {
            received_at_us: at,
            source: SocketAddrV4::new(Ipv4Addr::LOCALHOST, 8024),
            raw: Vec::new(),
            frame,
        }
    }

    #[test]
    fn three_four_five() {
        let view = to_spectrum(&frame_with(3, 4, 64)).unwrap();
        assert_eq!(view.subcarrier_count, 64);
        assert!(view.magnitude.iter().all(|&m| m == 5.0));
        assert!(view
            .phase_rad
            .iter()
            .all(|&p| (p - 0.927_295_218).abs() < 1e-8));
    }

    #[test]
    fn zero_sample_has_zero_phase() {
        let view = to_spectrum(&frame_with(0, 0, 64)).unwrap();
        assert!(view.magnitude.iter().all(|&m| m == 0.0));
        assert!(view.phase_rad.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn negative_real_axis_maps_to_plus_pi() {
        let view = to_spectrum(&frame_with(-5, 0, 1)).unwrap();
        assert_eq!(view.phase_rad[0], PI);
    }

    #[test]
    fn trailing_slots_are_ignored() {
        let mut f = frame_with(1, 1, 64);
        f.csi_i[100] = 999;
        let view = to_spectrum(&f).unwrap();
        assert_eq!(view.magnitude.len(), 64);
    }

    #[test]
    fn out_of_range_count_is_an_error() {
        let f = CsiDataFrame {
            csi_cnt: 0,
            ..Default::default()
        };
        assert_eq!(to_spectrum(&f), Err(AnalysisError::CsiCountOutOfRange(0)));
    }

    #[test]
    fn unwrap_removes_jumps() {
        let step = -PI / 8.0;
        let wrapped: Vec<f64> = (0..40)
            .map(|k| {
                let p = k as f64 * step;
                (p + PI).rem_euclid(2.0 * PI) - PI
            })
            .collect();
        let unwrapped = unwrap_phase(&wrapped);
        for (k, p) in unwrapped.iter().enumerate() {
            assert!((p - (k as f64 * step + wrapped[0])).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn db_conversion_floors_zero() {
        assert_eq!(magnitude_db(&[0.0, 1.0, 10.0, 1e-9]), vec![-120.0, 0.0, 20.0, -120.0]);
    }

    #[test]
    fn decimation_keeps_endpoints() {
        assert_eq!(decimation_indices(5, 256), vec![0, 1, 2, 3, 4]);
        let idx = decimation_indices(512, 256);
        assert_eq!(idx.len(), 256);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 511);
        assert!(idx.windows(2).all(|w| (2..=3).contains(&(w[1] - w[0]))));
        assert_eq!(decimation_indices(257, 256).len(), 256);
        assert!(decimation_indices(0, 256).is_empty());
    }

    #[test]
    fn csv_export() {
        let view = to_spectrum(&frame_with(3, 4, 2)).unwrap();
        let mut out = Vec::new();
        write_spectrum_csv(&mut out, &view).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "subcarrier,i,q,magnitude,phase_rad");
        assert!(lines[1].starts_with("0,3,4,5,0.927"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn counts_by_bandwidth_and_mcs() {
        let mut acc = StatsAccumulator::new();
        for k in 0..10 {
            let f = CsiDataFrame {
                bw: 3,
                mcs: 9,
                csi_cnt: 512,
                ..Default::default()
            };
            acc.accumulate(&record(f, k * 20_000));
        }
        let s = acc.snapshot();
        assert_eq!(s.total_frames, 10);
        assert_eq!(s.frames_by_bandwidth[&3], 10);
        assert_eq!(s.frames_by_mcs[&9], 10);
        assert!((s.frames_per_second - 50.0).abs() < 1e-9);
    }

    #[test]
    fn rssi_mean_over_populated_chains() {
        let mut acc = StatsAccumulator::new();
        for (at, r) in [(0, -40), (1, -44)] {
            let mut f = CsiDataFrame::default();
            f.rssi[0] = r;
            acc.accumulate(&record(f, at));
        }
        let s = acc.snapshot();
        assert_eq!(s.avg_rssi_per_chain[0], -42.0);
        assert_eq!(s.avg_rssi_per_chain[1], 0.0);
    }

    #[test]
    fn empty_snapshot_is_zero() {
        let s = StatsAccumulator::new().snapshot();
        assert_eq!(s, StatsSnapshot::default());
        assert_eq!(s.avg_rssi_per_chain.len(), 16);
    }

    #[test]
    fn rate_window_drops_old_arrivals() {
        let mut acc = StatsAccumulator::new();
        for k in 0..10 {
            acc.accumulate_frame(&CsiDataFrame::default(), k * 1_000_000);
        }
        // last 5 s holds arrivals at 4..=9 s
        assert!((acc.snapshot().frames_per_second - 1.0).abs() < 1e-9);
    }

    #[test]
    fn snapshot_json_shape() {
        let mut acc = StatsAccumulator::new();
        acc.accumulate_frame(&CsiDataFrame { bw: 2, mcs: 7, ..Default::default() }, 0);
        acc.record_decode_error();
        let v: serde_json::Value = serde_json::from_str(&acc.snapshot().to_json()).unwrap();
        assert_eq!(v["total_frames"], 1);
        assert_eq!(v["frames_by_bandwidth"]["2"], 1);
        assert_eq!(v["frames_by_mcs"]["7"], 1);
        assert_eq!(v["decode_errors"], 1);
        assert_eq!(v["avg_rssi_per_chain"].as_array().unwrap().len(), 16);
    }
}
