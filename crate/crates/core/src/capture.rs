//! Capture file persistence and replay.
//!
//! ```text
//! header (16 bytes):  "ZCSICAP1" | version u16 = 1 | 6 zero bytes
//! record (repeated):  received_at_us u64 | source_ip [u8; 4] | source_port u16
//!                     | len u32 | raw [u8; len]
//! ```
//!
//! All integers are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::Path;
use std::time::Duration;

use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::Instant;

use crate::record::CsiRecord;
use crate::wire::DecodeError;

pub const CAPTURE_MAGIC: &[u8; 8] = b"ZCSICAP1";
pub const CAPTURE_VERSION: u16 = 1;
pub const CAPTURE_HEADER_LEN: usize = 16;
const RECORD_PREFIX_LEN: usize = 8 + 4 + 2 + 4;

/// Upper bound on a single record's raw length, used to reject corrupt files.
pub const MAX_RECORD_LEN: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("bad capture header: {0}")]
    BadHeader(&'static str),
    #[error("truncated record after {complete} complete records")]
    TruncatedRecord { complete: usize },
    #[error("record {index} has implausible length {len}")]
    BadRecordLength { index: usize, len: u32 },
    #[error("record {index} does not decode: {source}")]
    Frame {
        index: usize,
        #[source]
        source: DecodeError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One stored datagram, before CSI decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureEntry {
    pub received_at_us: u64,
    pub source: SocketAddrV4,
    pub raw: Vec<u8>,
}

impl From<&CsiRecord> for CaptureEntry {
    fn from(r: &CsiRecord) -> Self {
        Self {
            received_at_us: r.received_at_us,
            source: r.source,
            raw: r.raw.clone(),
        }
    }
}

pub struct CaptureWriter<W: Write> {
    inner: W,
    records: usize,
}

impl CaptureWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut header = [0u8; CAPTURE_HEADER_LEN];
        header[..8].copy_from_slice(CAPTURE_MAGIC);
        header[8..10].copy_from_slice(&CAPTURE_VERSION.to_le_bytes());
        inner.write_all(&header)?;
        Ok(Self { inner, records: 0 })
    }

    pub fn write_entry(&mut self, received_at_us: u64, source: SocketAddrV4, raw: &[u8]) -> io::Result<()> {
        let len = u32::try_from(raw.len())
            .ok()
            .filter(|&l| l <= MAX_RECORD_LEN)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "record too large"))?;
        let mut prefix = [0u8; RECORD_PREFIX_LEN];
        prefix[..8].copy_from_slice(&received_at_us.to_le_bytes());
        prefix[8..12].copy_from_slice(&source.ip().octets());
        prefix[12..14].copy_from_slice(&source.port().to_le_bytes());
        prefix[14..18].copy_from_slice(&len.to_le_bytes());
        self.inner.write_all(&prefix)?;
        self.inner.write_all(raw)?;
        self.records += 1;
        Ok(())
    }

    pub fn write_record(&mut self, record: &CsiRecord) -> io::Result<()> {
        self.write_entry(record.received_at_us, record.source, &record.raw)
    }

    pub fn records_written(&self) -> usize {
        self.records
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Iterator over the entries of a capture stream.
///
/// After the last complete entry, a partial trailing record yields one
/// `TruncatedRecord` error and then the iterator ends.
pub struct CaptureReader<R: Read> {
    inner: R,
    index: usize,
    done: bool,
}

impl CaptureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CaptureError> {
        let mut header = [0u8; CAPTURE_HEADER_LEN];
        let n = read_up_to(&mut inner, &mut header)?;
        if n < CAPTURE_HEADER_LEN {
            return Err(CaptureError::BadHeader("file shorter than header"));
        }
        if &header[..8] != CAPTURE_MAGIC {
            return Err(CaptureError::BadHeader("magic is not ZCSICAP1"));
        }
        if u16::from_le_bytes([header[8], header[9]]) != CAPTURE_VERSION {
            return Err(CaptureError::BadHeader("unsupported version"));
        }
        Ok(Self {
            inner,
            index: 0,
            done: false,
        })
    }

    fn next_entry(&mut self) -> Result<Option<CaptureEntry>, CaptureError> {
        let mut prefix = [0u8; RECORD_PREFIX_LEN];
        match read_up_to(&mut self.inner, &mut prefix)? {
            0 => return Ok(None),
            RECORD_PREFIX_LEN => {}
            _ => return Err(CaptureError::TruncatedRecord { complete: self.index }),
        }
        let received_at_us = u64::from_le_bytes(prefix[..8].try_into().expect("8 bytes"));
        let ip = Ipv4Addr::new(prefix[8], prefix[9], prefix[10], prefix[11]);
        let port = u16::from_le_bytes([prefix[12], prefix[13]]);
        let len = u32::from_le_bytes(prefix[14..18].try_into().expect("4 bytes"));
        if len > MAX_RECORD_LEN {
            return Err(CaptureError::BadRecordLength {
                index: self.index,
                len,
            });
        }
        let mut raw = vec![0u8; len as usize];
        if read_up_to(&mut self.inner, &mut raw)? != raw.len() {
            return Err(CaptureError::TruncatedRecord { complete: self.index });
        }
        self.index += 1;
        Ok(Some(CaptureEntry {
            received_at_us,
            source: SocketAddrV4::new(ip, port),
            raw,
        }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<CaptureEntry, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_entry() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads a capture file and decodes every record.
///
/// Yields records in file order; a decode failure or truncation is yielded
/// as the final item.
pub fn read_capture(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<CsiRecord, CaptureError>>, CaptureError> {
    let reader = CaptureReader::open(path)?;
    let mut index = 0usize;
    Ok(reader.map(move |entry| {
        let entry = entry?;
        let i = index;
        index += 1;
        CsiRecord::from_raw(entry.received_at_us, entry.source, entry.raw)
            .map_err(|source| CaptureError::Frame { index: i, source })
    }))
}

/// Re-sends every stored datagram to `target`, preserving the recorded
/// inter-arrival spacing divided by `rate`. Returns the number of datagrams sent.
pub async fn replay_capture(
    path: impl AsRef<Path>,
    target: SocketAddrV4,
    rate: f64,
) -> Result<usize, CaptureError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(CaptureError::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            "replay rate must be a positive number",
        )));
    }
    let entries = CaptureReader::open(path)?.collect::<Result<Vec<_>, _>>()?;
    replay_entries(&entries, target, rate).await
}

pub async fn replay_entries(
    entries: &[CaptureEntry],
    target: SocketAddrV4,
    rate: f64,
) -> Result<usize, CaptureError> {
    let Some(first) = entries.first() else {
        return Ok(0);
    };
    let socket = UdpSocket::bind(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0)).await?;
    let start = Instant::now();
    for entry in entries {
        let offset_us = entry.received_at_us.saturating_sub(first.received_at_us) as f64 / rate;
        tokio::time::sleep_until(start + Duration::from_micros(offset_us as u64)).await;
        socket.send_to(&entry.raw, SocketAddr::V4(target)).await?;
    }
    Ok(entries.len())
}
