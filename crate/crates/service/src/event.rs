use serde::{Deserialize, Serialize};
use zcsi_core::analysis::{decimate, to_spectrum};
use zcsi_core::wire::{Bandwidth, MacAddr, CHAIN_SLOTS};
use zcsi_core::CsiRecord;

/// Upper bound on plotted points per event.
pub const MAX_PLOT_POINTS: usize = 256;

/// One received report, reduced for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub received_at_us: u64,
    pub peer_addr: MacAddr,
    pub bw_code: u32,
    pub bw_mhz: u32,
    pub mcs: i16,
    pub rssi: [i32; CHAIN_SLOTS],
    pub csi_cnt: i16,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<i32>>,
}

impl FrameEvent {
    /// `include_iq` attaches the full, undecimated I/Q samples.
    pub fn from_record(record: &CsiRecord, include_iq: bool) -> Self {
        let frame = &record.frame;
        let (magnitude, phase) = match to_spectrum(frame) {
            Ok(view) => (
                decimate(&view.magnitude, MAX_PLOT_POINTS),
                decimate(&view.phase_rad, MAX_PLOT_POINTS),
            ),
            Err(_) => (Vec::new(), Vec::new()),
        };
        let n = frame.subcarrier_count().unwrap_or(0);
        Self {
            received_at_us: record.received_at_us,
            peer_addr: frame.peer_addr,
            bw_code: frame.bw,
            bw_mhz: Bandwidth::from_code(frame.bw).map_or(0, Bandwidth::mhz),
            mcs: frame.mcs,
            rssi: frame.rssi,
            csi_cnt: frame.csi_cnt,
            magnitude,
            phase,
            i: include_iq.then(|| frame.csi_i[..n].to_vec()),
            q: include_iq.then(|| frame.csi_q[..n].to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::SocketAddrV4;
    use zcsi_core::wire::CsiDataFrame;

    fn record(bw: u32, cnt: i16) -> CsiRecord {
        let mut frame = CsiDataFrame { bw, csi_cnt: cnt, ..Default::default() };
        for k in 0..cnt as usize {
            frame.csi_i[k] = k as i32;
            frame.csi_q[k] = 0;
        }
        CsiRecord {
            received_at_us: 7,
            source: SocketAddrV4::new([127, 0, 0, 1].into(), 8024),
            raw: Vec::new(),
            frame,
        }
    }

    #[test]
    fn decimates_large_frames_and_keeps_endpoints() {
        let ev = FrameEvent::from_record(&record(3, 512), false);
        assert_eq!(ev.bw_mhz, 160);
        assert!(ev.magnitude.len() <= MAX_PLOT_POINTS);
        assert_eq!(ev.magnitude.len(), ev.phase.len());
        assert_eq!(ev.magnitude[0], 0.0);
        assert_eq!(*ev.magnitude.last().unwrap(), 511.0);
        assert!(ev.i.is_none());
        let json = serde_json::to_string(&ev).unwrap();
        assert!(json.len() < 8192, "{} bytes", json.len());
        assert!(!json.contains("\"i\""));
    }

    #[test]
    fn small_frames_pass_through_with_iq() {
        let ev = FrameEvent::from_record(&record(0, 64), true);
        assert_eq!(ev.magnitude.len(), 64);
        assert_eq!(ev.i.as_ref().unwrap().len(), 64);
        assert_eq!(ev.q.as_ref().unwrap().len(), 64);
        let v: serde_json::Value = serde_json::to_value(&ev).unwrap();
        assert_eq!(v["peer_addr"], "00:00:00:00:00:00");
        assert_eq!(v["rssi"].as_array().unwrap().len(), 16);
    }
}
