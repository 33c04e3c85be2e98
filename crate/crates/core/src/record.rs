use std::net::SocketAddrV4;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::wire::{decode_csi_frame, CsiDataFrame, DecodeError};

/// A received CSI report together with its arrival metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsiRecord {
    /// Wall-clock arrival time, microseconds since the Unix epoch.
    pub received_at_us: u64,
    pub source: SocketAddrV4,
    pub frame: CsiDataFrame,
    /// The datagram exactly as received; always decodes to `frame`.
    pub raw: Vec<u8>,
}

impl CsiRecord {
    pub fn from_raw(
        received_at_us: u64,
        source: SocketAddrV4,
        raw: Vec<u8>,
    ) -> Result<Self, DecodeError> {
        let frame = decode_csi_frame(&raw)?;
        Ok(Self {
            received_at_us,
            source,
            frame,
            raw,
        })
    }
}

pub fn unix_micros_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}
