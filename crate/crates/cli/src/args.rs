use std::net::Ipv4Addr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zcsi_core::emulator::StationConfig;
use zcsi_core::wire::{Band, Bandwidth, MacAddr};

#[derive(Debug, Parser)]
#[command(name = "zcsi", version, about = "Configure, capture and inspect CSI reports from the ZTE AX3000")]
pub struct Cli {
    /// Machine-readable output and diagnostics.
    #[arg(long, global = true)]
    pub json: bool,

    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask the AP whether it is ready (CheckAvailability).
    Probe(ProbeArgs),
    /// Run the configuration sequence and start CSI reporting.
    Start(StartArgs),
    /// Stop CSI reporting.
    Stop(ApArgs),
    /// Receive CSI reports and write them to a capture file.
    Capture(CaptureArgs),
    /// Convert a capture file to CSV or JSON, or re-serialize it.
    Parse(ParseArgs),
    /// Print statistics for a capture file.
    Stats(InputArgs),
    /// Send the datagrams of a capture file again, with original timing.
    Replay(ReplayArgs),
    /// Run the AP emulator; prints one JSON event per line.
    Emulate(EmulateArgs),
    /// Run the collector with the HTTP/WebSocket API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ApArgs {
    /// AP address.
    #[arg(long)]
    pub ap: Ipv4Addr,
    /// AP command port.
    #[arg(long, env = "ZCSI_COMMAND_PORT", default_value_t = 8021)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub ap: ApArgs,
    /// Reply timeout per attempt, in milliseconds.
    #[arg(long, default_value_t = 2000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
}

#[derive(Debug, Args)]
pub struct StartArgs {
    #[command(flatten)]
    pub ap: ApArgs,
    /// Band to lock the AP to (2.4g or 5g).
    #[arg(long)]
    pub band: Band,
    /// 802.11 frame type byte, hex (0x22) or decimal.
    #[arg(long, default_value = "0x22", value_parser = parse_frame_type)]
    pub frame_type: u8,
    /// Report only these STAs (repeatable, at most 5).
    #[arg(long = "filter", value_name = "MAC")]
    pub filters: Vec<MacAddr>,
    /// Address the AP should send CSI reports to.
    #[arg(long)]
    pub target_ip: Ipv4Addr,
    /// Delay between commands, in milliseconds (at least 500).
    #[arg(long, default_value_t = 500)]
    pub delay_ms: u64,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    /// Capture file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: Ipv4Addr,
    /// Report listen port.
    #[arg(long, env = "ZCSI_REPORT_PORT", default_value_t = 8023)]
    pub port: u16,
    /// Keep only reports from these STAs (repeatable).
    #[arg(long = "filter", value_name = "MAC")]
    pub filters: Vec<MacAddr>,
    /// Stop after this many seconds instead of waiting for Ctrl-C.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Drop datagrams whose source port is not 8024.
    #[arg(long)]
    pub strict_source_port: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParseFormat {
    /// One row per subcarrier.
    Csv,
    /// One JSON object per record, per line.
    Json,
    /// The capture format itself (lossless re-serialization).
    Capture,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Capture file to read.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output format; defaults to json with --json, csv otherwise.
    #[arg(long, value_enum)]
    pub format: Option<ParseFormat>,
    /// Output file (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Destination address.
    #[arg(long, default_value = "127.0.0.1")]
    pub target_ip: Ipv4Addr,
    #[arg(long, env = "ZCSI_REPORT_PORT", default_value_t = 8023)]
    pub port: u16,
    /// Speed factor; 2.0 replays twice as fast.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
}

#[derive(Debug, Args)]
pub struct EmulateArgs {
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: Ipv4Addr,
    /// Command port.
    #[arg(long, env = "ZCSI_COMMAND_PORT", default_value_t = 8021)]
    pub port: u16,
    /// Destination port for CSI reports.
    #[arg(long, env = "ZCSI_REPORT_PORT", default_value_t = 8023)]
    pub report_port: u16,
    /// Source port for CSI reports.
    #[arg(long, default_value_t = 8024)]
    pub report_source_port: u16,
    /// Frames per second, per station.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic STA as MAC[,BW_MHZ[,MCS]] (repeatable).
    #[arg(long = "station", value_name = "SPEC", value_parser = parse_station)]
    pub stations: Vec<StationConfig>,
    /// Report destination before any ReportConfig arrives.
    #[arg(long)]
    pub target_ip: Option<Ipv4Addr>,
    /// Accept commands in any order (the band lock still applies).
    #[arg(long)]
    pub lenient: bool,
    /// JSON emulator configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "0.0.0.0")]
    pub listen: Ipv4Addr,
    #[arg(long, env = "ZCSI_HTTP_PORT", default_value_t = 8080)]
    pub http_port: u16,
    /// Report listen port.
    #[arg(long, env = "ZCSI_REPORT_PORT", default_value_t = 8023)]
    pub report_port: u16,
    /// AP command port used for sessions.
    #[arg(long, env = "ZCSI_COMMAND_PORT", default_value_t = 8021)]
    pub command_port: u16,
    /// Also append every accepted report to this capture file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep only reports from these STAs (repeatable).
    #[arg(long = "filter", value_name = "MAC")]
    pub filters: Vec<MacAddr>,
    /// Stream events per second per client.
    #[arg(long, default_value_t = 30.0)]
    pub stream_rate: f64,
}

pub fn parse_frame_type(s: &str) -> Result<u8, String> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u8::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| format!("{s:?} is not a byte in hex (0x22) or decimal (34)"))
}

pub fn parse_station(s: &str) -> Result<StationConfig, String> {
    let mut parts = s.split(',');
    let mac: MacAddr = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|e| format!("{e}"))?;
    let bandwidth = match parts.next() {
        Some(bw) => bw.parse::<Bandwidth>()?,
        None => Bandwidth::Bw80,
    };
    let mcs = match parts.next() {
        Some(m) => m.trim().parse::<i16>().map_err(|_| format!("bad MCS {m:?}"))?,
        None => 7,
    };
    if parts.next().is_some() {
        return Err(format!("{s:?}: expected MAC[,BW_MHZ[,MCS]]"));
    }
    Ok(StationConfig::new(mac, bandwidth, mcs, vec![-42, -45, -47]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_type_accepts_hex_and_decimal() {
        assert_eq!(parse_frame_type("0x22"), Ok(0x22));
        assert_eq!(parse_frame_type("34"), Ok(34));
        assert_eq!(parse_frame_type("0X08"), Ok(8));
        assert!(parse_frame_type("0x122").is_err());
        assert!(parse_frame_type("qos").is_err());
    }

    #[test]
    fn station_specs() {
        let s = parse_station("02:00:00:00:00:01,40,3").unwrap();
        assert_eq!(s.bandwidth, Bandwidth::Bw40);
        assert_eq!(s.mcs, 3);
        let s = parse_station("02-00-00-00-00-02").unwrap();
        assert_eq!(s.bandwidth, Bandwidth::Bw80);
        assert!(parse_station("02:00:00:00:00:01,40,3,9").is_err());
        assert!(parse_station("nope").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
