//! Bit-exact codec for the AX3000 CSI control commands and CSI report records.
//!
//! Every field is little-endian and fully packed, with no padding between fields.
//!
//! Command datagram (sent to the AP on UDP 8021):
//!
//! ```text
//! +-----------------+----------+-------------------------+
//! | magic (u64)     | type (u8)| payload (0..6 bytes)    |
//! | 0xCAFE2025      | 1..=6    | depends on type         |
//! +-----------------+----------+-------------------------+
//! ```
//!
//! CSI report datagram (sent by the AP to UDP 8023): a fixed 200-byte header
//! followed by 512 I samples and 512 Q samples, each a signed 32-bit integer,
//! for 4296 bytes in total.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic number carried in the first 8 bytes of every command datagram.
pub const COMMAND_MAGIC: u64 = 0xCAFE_2025;

/// Required value of the high 16 bits of a CSI report's magic field.
pub const CSI_MAGIC_HIGH: u16 = 0xCAFE;

/// Magic value written by this crate when it produces CSI reports.
pub const CSI_MAGIC_DEFAULT: u32 = 0xCAFE_0001;

/// Number of I (and Q) slots carried by every CSI report.
pub const CSI_SLOTS: usize = 512;

/// Size of the fixed metadata header preceding the I/Q arrays.
pub const CSI_HEADER_LEN: usize = 200;

/// Total wire size of a CSI report.
pub const CSI_FRAME_LEN: usize = CSI_HEADER_LEN + 2 * CSI_SLOTS * 4;

/// Number of per-chain entries in the rssi, resv_3 and agc_gain arrays.
pub const CHAIN_SLOTS: usize = 16;

/// Maximum number of STA filter entries the AP keeps.
pub const MAX_STA_FILTERS: usize = 5;

/// Frame type byte for QoS data (type 2, subtype 8).
pub const FRAME_TYPE_QOS_DATA: u8 = 0x22;

const COMMAND_HEADER_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic 0x{found:x}")]
    BadMagic { found: u64 },
    #[error("unknown command type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated: need {needed} bytes, got {actual}")]
    TruncatedPayload { needed: usize, actual: usize },
    #[error("{extra} trailing bytes after command payload")]
    TrailingBytes { extra: usize },
    #[error("invalid value {value} for field {field}")]
    InvalidField { field: &'static str, value: i64 },
    #[error("CSI frame must be exactly {CSI_FRAME_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("csi_cnt {0} outside 1..=512")]
    CsiCountOutOfRange(i16),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("cmd_type 0x{cmd_type:02x} does not match payload {payload}")]
    TypeMismatch { cmd_type: u8, payload: &'static str },
    #[error("invalid CSI frame: {0}")]
    InvalidFrame(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameTypeError {
    #[error("type subfield {0} does not fit in 2 bits")]
    TypeOutOfRange(u8),
    #[error("subtype subfield {0} does not fit in 4 bits")]
    SubtypeOutOfRange(u8),
}

/// A 48-bit MAC address in transmission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const fn new(octets: [u8; 6]) -> Self {
        Self(octets)
    }

    pub const fn octets(&self) -> [u8; 6] {
        self.0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.0;
        write!(f, "{a:02x}:{b:02x}:{c:02x}:{d:02x}:{e:02x}:{g:02x}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address {0:?}")]
pub struct MacParseError(pub String);

impl FromStr for MacAddr {
    type Err = MacParseError;

    /// Accepts `aa:bb:cc:dd:ee:ff` or `aa-bb-cc-dd-ee-ff`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MacParseError(s.to_string());
        let parts: Vec<&str> = s.trim().split([':', '-']).collect();
        if parts.len() != 6 {
            return Err(err());
        }
        let mut octets = [0u8; 6];
        for (slot, part) in octets.iter_mut().zip(parts) {
            if part.len() != 2 {
                return Err(err());
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| err())?;
        }
        Ok(Self(octets))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Radio band the AP collects CSI from. Only one band per boot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Band {
    #[serde(rename = "2.4g")]
    Band2G4 = 0,
    #[serde(rename = "5g")]
    Band5G = 1,
}

impl Band {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Band::Band2G4),
            1 => Some(Band::Band5G),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Band2G4 => "2.4g",
            Band::Band5G => "5g",
        })
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "2.4g" | "2g4" | "2.4" | "0" => Ok(Band::Band2G4),
            "5g" | "5" | "1" => Ok(Band::Band5G),
            other => Err(format!("unknown band {other:?}, expected 2.4g or 5g")),
        }
    }
}

/// Bandwidth code of the PPDU a CSI report was estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Bandwidth {
    Bw20 = 0,
    Bw40 = 1,
    Bw80 = 2,
    Bw160 = 3,
    /// 160 MHz built from two non-contiguous 80 MHz segments.
    Bw80p80 = 4,
}

impl Bandwidth {
    pub const ALL: [Bandwidth; 5] = [
        Bandwidth::Bw20,
        Bandwidth::Bw40,
        Bandwidth::Bw80,
        Bandwidth::Bw160,
        Bandwidth::Bw80p80,
    ];

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn mhz(self) -> u32 {
        match self {
            Bandwidth::Bw20 => 20,
            Bandwidth::Bw40 => 40,
            Bandwidth::Bw80 => 80,
            Bandwidth::Bw160 | Bandwidth::Bw80p80 => 160,
        }
    }

    pub fn max_subcarriers(self) -> usize {
        match self {
            Bandwidth::Bw20 => 64,
            Bandwidth::Bw40 => 128,
            Bandwidth::Bw80 => 256,
            Bandwidth::Bw160 | Bandwidth::Bw80p80 => 512,
        }
    }
}

impl FromStr for Bandwidth {
    type Err = String;

    /// Accepts `20`, `40`, `80`, `160` or `80+80`, with an optional `mhz` suffix.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.strip_suffix("mhz").unwrap_or(&lower).trim() {
            "20" => Ok(Bandwidth::Bw20),
            "40" => Ok(Bandwidth::Bw40),
            "80" => Ok(Bandwidth::Bw80),
            "160" => Ok(Bandwidth::Bw160),
            "80+80" => Ok(Bandwidth::Bw80p80),
            _ => Err(format!("unknown bandwidth {s:?}; expected 20, 40, 80, 160 or 80+80")),
        }
    }
}

/// Packs the 802.11 Type (B3..B2) and Subtype (B7..B4) subfields into the
/// `0 0 B7 B6 B5 B4 B3 B2` layout used by the CSI configuration command.
pub fn frame_type_from_subfields(frame_type: u8, subtype: u8) -> Result<u8, FrameTypeError> {
    if frame_type > 0b11 {
        return Err(FrameTypeError::TypeOutOfRange(frame_type));
    }
    if subtype > 0b1111 {
        return Err(FrameTypeError::SubtypeOutOfRange(subtype));
    }
    Ok((subtype << 2) | frame_type)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandPayload {
    ReportEnable { enable: bool },
    StaFilter { mac: MacAddr },
    CsiConfig { frame_type: u8 },
    ReportConfig { target_ip: Ipv4Addr },
    BandConfig { band: Band },
    CheckAvailability,
}

impl CommandPayload {
    pub fn cmd_type(&self) -> u8 {
        match self {
            CommandPayload::ReportEnable { .. } => 0x1,
            CommandPayload::StaFilter { .. } => 0x2,
            CommandPayload::CsiConfig { .. } => 0x3,
            CommandPayload::ReportConfig { .. } => 0x4,
            CommandPayload::BandConfig { .. } => 0x5,
            CommandPayload::CheckAvailability => 0x6,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            CommandPayload::ReportEnable { .. } => "ReportEnable",
            CommandPayload::StaFilter { .. } => "StaFilter",
            CommandPayload::CsiConfig { .. } => "CsiConfig",
            CommandPayload::ReportConfig { .. } => "ReportConfig",
            CommandPayload::BandConfig { .. } => "BandConfig",
            CommandPayload::CheckAvailability => "CheckAvailability",
        }
    }
}

/// Payload length in bytes for a command type, or `None` if the type is unknown.
pub fn command_payload_len(cmd_type: u8) -> Option<usize> {
    match cmd_type {
        0x1 | 0x3 | 0x5 => Some(1),
        0x2 => Some(6),
        0x4 => Some(4),
        0x6 => Some(0),
        _ => None,
    }
}

/// Total datagram length for a command type, or `None` if the type is unknown.
pub fn command_wire_len(cmd_type: u8) -> Option<usize> {
    command_payload_len(cmd_type).map(|n| COMMAND_HEADER_LEN + n)
}

/// One configuration command. The magic number is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandFrame {
    pub cmd_type: u8,
    pub payload: CommandPayload,
}

impl CommandFrame {
    pub fn new(payload: CommandPayload) -> Self {
        Self {
            cmd_type: payload.cmd_type(),
            payload,
        }
    }

    pub fn report_enable(enable: bool) -> Self {
        Self::new(CommandPayload::ReportEnable { enable })
    }

    pub fn sta_filter(mac: MacAddr) -> Self {
        Self::new(CommandPayload::StaFilter { mac })
    }

    pub fn csi_config(frame_type: u8) -> Self {
        Self::new(CommandPayload::CsiConfig { frame_type })
    }

    pub fn report_config(target_ip: Ipv4Addr) -> Self {
        Self::new(CommandPayload::ReportConfig { target_ip })
    }

    pub fn band_config(band: Band) -> Self {
        Self::new(CommandPayload::BandConfig { band })
    }

    pub fn check_availability() -> Self {
        Self::new(CommandPayload::CheckAvailability)
    }
}

pub fn encode_command(frame: &CommandFrame) -> Result<Vec<u8>, EncodeError> {
    if frame.cmd_type != frame.payload.cmd_type() {
        return Err(EncodeError::TypeMismatch {
            cmd_type: frame.cmd_type,
            payload: frame.payload.name(),
        });
    }
    let mut out = Vec::with_capacity(COMMAND_HEADER_LEN + 6);
    out.extend_from_slice(&COMMAND_MAGIC.to_le_bytes());
    out.push(frame.cmd_type);
    match frame.payload {
        CommandPayload::ReportEnable { enable } => out.push(enable as u8),
        CommandPayload::StaFilter { mac } => out.extend_from_slice(&mac.0),
        CommandPayload::CsiConfig { frame_type } => out.push(frame_type),
        CommandPayload::ReportConfig { target_ip } => out.extend_from_slice(&target_ip.octets()),
        CommandPayload::BandConfig { band } => out.push(band.code()),
        CommandPayload::CheckAvailability => {}
    }
    Ok(out)
}

pub fn decode_command(data: &[u8]) -> Result<CommandFrame, DecodeError> {
    let magic_bytes: [u8; 8] = data
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or(DecodeError::TruncatedPayload {
            needed: 8,
            actual: data.len(),
        })?;
    let magic = u64::from_le_bytes(magic_bytes);
    if magic != COMMAND_MAGIC {
        return Err(DecodeError::BadMagic { found: magic });
    }
    let cmd_type = *data.get(8).ok_or(DecodeError::TruncatedPayload {
        needed: COMMAND_HEADER_LEN,
        actual: data.len(),
    })?;
    let needed = command_wire_len(cmd_type).ok_or(DecodeError::UnknownType(cmd_type))?;
    if data.len() < needed {
        return Err(DecodeError::TruncatedPayload {
            needed,
            actual: data.len(),
        });
    }
    if data.len() > needed {
        return Err(DecodeError::TrailingBytes {
            extra: data.len() - needed,
        });
    }
    let body = &data[COMMAND_HEADER_LEN..];
    let payload = match cmd_type {
        0x1 => CommandPayload::ReportEnable {
            enable: match body[0] {
                0 => false,
                1 => true,
                v => {
                    return Err(DecodeError::InvalidField {
                        field: "enable",
                        value: v as i64,
                    })
                }
            },
        },
        0x2 => CommandPayload::StaFilter {
            mac: MacAddr(body[..6].try_into().expect("length checked")),
        },
        0x3 => CommandPayload::CsiConfig {
            frame_type: body[0],
        },
        0x4 => CommandPayload::ReportConfig {
            target_ip: Ipv4Addr::new(body[0], body[1], body[2], body[3]),
        },
        0x5 => CommandPayload::BandConfig {
            band: Band::from_code(body[0]).ok_or(DecodeError::InvalidField {
                field: "band",
                value: body[0] as i64,
            })?,
        },
        0x6 => CommandPayload::CheckAvailability,
        _ => unreachable!("length lookup rejects unknown types"),
    };
    Ok(CommandFrame { cmd_type, payload })
}

/// One CSI report as carried on the wire.
///
/// Reserved fields are kept verbatim so that re-encoding a decoded frame
/// reproduces the original bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsiDataFrame {
    pub magic: u32,
    pub vendor: u8,
    pub chip_id: u32,
    pub timestamp_us: u64,
    pub resv: u32,
    pub bw: u32,
    pub phy_mode: u32,
    pub resv_1: u8,
    pub resv_2: u16,
    pub peer_addr: MacAddr,
    pub rssi: [i32; CHAIN_SLOTS],
    pub resv_3: [i32; CHAIN_SLOTS],
    pub agc_gain: [i8; CHAIN_SLOTS],
    pub mcs: i16,
    pub gi_type: i8,
    pub coding: i8,
    pub stbc: i8,
    pub resv_4: i8,
    pub dcm: i8,
    pub resv_5: i8,
    pub resv_6: u64,
    pub csi_cnt: i16,
    pub csi_i: Box<[i32; CSI_SLOTS]>,
    pub csi_q: Box<[i32; CSI_SLOTS]>,
}

impl Default for CsiDataFrame {
    fn default() -> Self {
        Self {
            magic: CSI_MAGIC_DEFAULT,
            vendor: 2,
            chip_id: 1,
            timestamp_us: 0,
            resv: 0,
            bw: 0,
            phy_mode: 0,
            resv_1: 0,
            resv_2: 0,
            peer_addr: MacAddr::default(),
            rssi: [0; CHAIN_SLOTS],
            resv_3: [0; CHAIN_SLOTS],
            agc_gain: [0; CHAIN_SLOTS],
            mcs: 0,
            gi_type: 0,
            coding: 0,
            stbc: 0,
            resv_4: 0,
            dcm: 0,
            resv_5: 0,
            resv_6: 0,
            csi_cnt: 64,
            csi_i: Box::new([0; CSI_SLOTS]),
            csi_q: Box::new([0; CSI_SLOTS]),
        }
    }
}

impl CsiDataFrame {
    pub fn bandwidth(&self) -> Option<Bandwidth> {
        Bandwidth::from_code(self.bw)
    }

    /// Number of valid subcarrier entries, or `None` if csi_cnt is out of range.
    pub fn subcarrier_count(&self) -> Option<usize> {
        match self.csi_cnt {
            1..=512 => Some(self.csi_cnt as usize),
            _ => None,
        }
    }

    /// True when csi_cnt agrees with the maximum subcarrier count of `bw`.
    ///
    /// The decoder does not reject disagreeing frames; callers may flag them.
    pub fn subcarrier_count_matches_bandwidth(&self) -> bool {
        match (self.bandwidth(), self.subcarrier_count()) {
            (Some(bw), Some(n)) => n == bw.max_subcarriers(),
            _ => false,
        }
    }

    /// Chains whose rssi entry is nonzero.
    pub fn active_chains(&self) -> impl Iterator<Item = usize> + '_ {
        self.rssi
            .iter()
            .enumerate()
            .filter(|(_, &r)| r != 0)
            .map(|(i, _)| i)
    }

    fn check(&self) -> Result<(), EncodeError> {
        if (self.magic >> 16) as u16 != CSI_MAGIC_HIGH {
            return Err(EncodeError::InvalidFrame("magic high half is not 0xCAFE"));
        }
        if self.bandwidth().is_none() {
            return Err(EncodeError::InvalidFrame("bw outside 0..=4"));
        }
        if self.subcarrier_count().is_none() {
            return Err(EncodeError::InvalidFrame("csi_cnt outside 1..=512"));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn put<const N: usize>(&mut self, bytes: [u8; N]) {
        self.buf.extend_from_slice(&bytes);
    }
}

/// Cursor over a buffer whose length has already been validated.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N]
            .try_into()
            .expect("length validated before reading");
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn i8(&mut self) -> i8 {
        i8::from_le_bytes(self.take())
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn i32_array<const N: usize>(&mut self) -> [i32; N] {
        std::array::from_fn(|_| self.i32())
    }
}

pub fn encode_csi_frame(frame: &CsiDataFrame) -> Result<Vec<u8>, EncodeError> {
    frame.check()?;
    let mut w = Writer {
        buf: Vec::with_capacity(CSI_FRAME_LEN),
    };
    w.put(frame.magic.to_le_bytes());
    w.put([frame.vendor]);
    w.put(frame.chip_id.to_le_bytes());
    w.put(frame.timestamp_us.to_le_bytes());
    w.put(frame.resv.to_le_bytes());
    w.put(frame.bw.to_le_bytes());
    w.put(frame.phy_mode.to_le_bytes());
    w.put([frame.resv_1]);
    w.put(frame.resv_2.to_le_bytes());
    w.put(frame.peer_addr.0);
    for v in frame.rssi.iter().chain(frame.resv_3.iter()) {
        w.put(v.to_le_bytes());
    }
    for v in frame.agc_gain {
        w.put(v.to_le_bytes());
    }
    w.put(frame.mcs.to_le_bytes());
    for v in [
        frame.gi_type,
        frame.coding,
        frame.stbc,
        frame.resv_4,
        frame.dcm,
        frame.resv_5,
    ] {
        w.put(v.to_le_bytes());
    }
    w.put(frame.resv_6.to_le_bytes());
    w.put(frame.csi_cnt.to_le_bytes());
    debug_assert_eq!(w.buf.len(), CSI_HEADER_LEN);
    for v in frame.csi_i.iter().chain(frame.csi_q.iter()) {
        w.put(v.to_le_bytes());
    }
    debug_assert_eq!(w.buf.len(), CSI_FRAME_LEN);
    Ok(w.buf)
}

pub fn decode_csi_frame(data: &[u8]) -> Result<CsiDataFrame, DecodeError> {
    if data.len() >= 4 {
        let magic = u32::from_le_bytes(data[..4].try_into().expect("4 bytes"));
        if (magic >> 16) as u16 != CSI_MAGIC_HIGH {
            return Err(DecodeError::BadMagic {
                found: magic as u64,
            });
        }
    }
    if data.len() != CSI_FRAME_LEN {
        return Err(DecodeError::BadLength(data.len()));
    }
    let mut r = Reader { buf: data, pos: 0 };
    let magic = r.u32();
    let vendor = r.u8();
    let chip_id = r.u32();
    let timestamp_us = r.u64();
    let resv = r.u32();
    let bw = r.u32();
    if Bandwidth::from_code(bw).is_none() {
        return Err(DecodeError::InvalidField {
            field: "bw",
            value: bw as i64,
        });
    }
    let phy_mode = r.u32();
    let resv_1 = r.u8();
    let resv_2 = r.u16();
    let peer_addr = MacAddr(r.take());
    let rssi = r.i32_array();
    let resv_3 = r.i32_array();
    let agc_gain = r.take::<CHAIN_SLOTS>().map(|b| b as i8);
    let mcs = r.i16();
    let gi_type = r.i8();
    let coding = r.i8();
    let stbc = r.i8();
    let resv_4 = r.i8();
    let dcm = r.i8();
    let resv_5 = r.i8();
    let resv_6 = r.u64();
    let csi_cnt = r.i16();
    if !(1..=CSI_SLOTS as i16).contains(&csi_cnt) {
        return Err(DecodeError::CsiCountOutOfRange(csi_cnt));
    }
    let csi_i = Box::new(r.i32_array());
    let csi_q = Box::new(r.i32_array());
    Ok(CsiDataFrame {
        magic,
        vendor,
        chip_id,
        timestamp_us,
        resv,
        bw,
        phy_mode,
        resv_1,
        resv_2,
        peer_addr,
        rssi,
        resv_3,
        agc_gain,
        mcs,
        gi_type,
        coding,
        stbc,
        resv_4,
        dcm,
        resv_5,
        resv_6,
        csi_cnt,
        csi_i,
        csi_q,
    })
}
