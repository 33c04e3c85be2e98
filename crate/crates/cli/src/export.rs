//! Text renderings of capture records and statistics.

use std::io::{self, Write};

use serde_json::{json, Value};
use zcsi_core::analysis::{to_spectrum, StatsSnapshot};
use zcsi_core::wire::Bandwidth;
use zcsi_core::CsiRecord;

pub const CSV_HEADER: &str = "record,received_at_us,source,peer_addr,bw_mhz,mcs,subcarrier,i,q,magnitude,phase_rad";

/// One row per reported subcarrier.
pub fn write_csv_rows(out: &mut impl Write, index: usize, record: &CsiRecord) -> io::Result<()> {
    let f = &record.frame;
    let bw = Bandwidth::from_code(f.bw).map_or(0, Bandwidth::mhz);
    let Ok(view) = to_spectrum(f) else {
        return Ok(());
    };
    for k in 0..view.subcarrier_count {
        writeln!(
            out,
            "{index},{},{},{},{bw},{},{k},{},{},{},{}",
            record.received_at_us,
            record.source,
            f.peer_addr,
            f.mcs,
            f.csi_i[k],
            f.csi_q[k],
            view.magnitude[k],
            view.phase_rad[k],
        )?;
    }
    Ok(())
}

/// Every header field plus the first `csi_cnt` I/Q samples.
pub fn record_json(index: usize, record: &CsiRecord) -> Value {
    let f = &record.frame;
    let n = f.subcarrier_count().unwrap_or(0);
    json!({
        "record": index,
        "received_at_us": record.received_at_us,
        "source": record.source.to_string(),
        "magic": f.magic,
        "vendor": f.vendor,
        "chip_id": f.chip_id,
        "timestamp_us": f.timestamp_us,
        "resv": f.resv,
        "bw": f.bw,
        "bw_mhz": Bandwidth::from_code(f.bw).map_or(0, Bandwidth::mhz),
        "phy_mode": f.phy_mode,
        "resv_1": f.resv_1,
        "resv_2": f.resv_2,
        "peer_addr": f.peer_addr,
        "rssi": f.rssi,
        "resv_3": f.resv_3,
        "agc_gain": f.agc_gain,
        "mcs": f.mcs,
        "gi_type": f.gi_type,
        "coding": f.coding,
        "stbc": f.stbc,
        "resv_4": f.resv_4,
        "dcm": f.dcm,
        "resv_5": f.resv_5,
        "resv_6": f.resv_6,
        "csi_cnt": f.csi_cnt,
        "csi_i": &f.csi_i[..n],
        "csi_q": &f.csi_q[..n],
    })
}

pub fn stats_text(s: &StatsSnapshot) -> String {
    let mut out = format!(
        "total frames:  {}\ndecode errors: {}\nframes/s:      {:.2}\n",
        s.total_frames, s.decode_errors, s.frames_per_second
    );
    out.push_str("by bandwidth:\n");
    for (code, n) in &s.frames_by_bandwidth {
        let label = match Bandwidth::from_code(*code) {
            Some(Bandwidth::Bw80p80) => "80+80 MHz".to_string(),
            Some(bw) => format!("{} MHz", bw.mhz()),
            None => format!("code {code}"),
        };
        out.push_str(&format!("  {label:>10}  {n}\n"));
    }
    out.push_str("by MCS:\n");
    for (mcs, n) in &s.frames_by_mcs {
        out.push_str(&format!("  {mcs:>10}  {n}\n"));
    }
    out.push_str("average RSSI:\n");
    for (chain, rssi) in s.avg_rssi_per_chain.iter().enumerate() {
        if *rssi != 0.0 {
            out.push_str(&format!("  chain {chain:>4}  {rssi:.2} dBm\n"));
        }
    }
    out
}
