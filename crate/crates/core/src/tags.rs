//! Time-tag streams and the `QTAG` binary container.
//!
//! File layout (little endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "QTAG"
//!      4     2  version (1)
//!      6     4  resolution_ps
//!     10     2  channel_count
//!     12     8  record_count
//!     20    44  zero
//!     64   16n  records: u64 timestamp ticks, u16 channel, 6 zero bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTAG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TagRecord {
    pub timestamp: u64,
    pub channel: u16,
}

/// Time-ordered detection records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    resolution_ps: u32,
    channel_count: u16,
    records: Vec<TagRecord>,
    /// Free-form provenance, usually the scenario digest. Not stored in files.
    pub metadata: String,
}

impl TagStream {
    /// Builds a stream, checking ordering and channel range.
    pub fn new(resolution_ps: u32, channel_count: u16, records: Vec<TagRecord>) -> Result<Self> {
        if resolution_ps == 0 {
            return Err(Error::Domain("resolution must be >= 1 ps".into()));
        }
        if let Some(w) = records.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Format(format!("timestamps decrease at record {}", w + 1)));
        }
        if let Some(r) = records.iter().find(|r| r.channel >= channel_count) {
            return Err(Error::Format(format!(
                "channel {} outside declared set 0..{channel_count}",
                r.channel
            )));
        }
        Ok(Self { resolution_ps, channel_count, records, metadata: String::new() })
    }

    /// Sorts the records before building the stream.
    pub fn from_unsorted(resolution_ps: u32, channel_count: u16, mut records: Vec<TagRecord>) -> Result<Self> {
        records.sort_unstable();
        Self::new(resolution_ps, channel_count, records)
    }

    pub fn resolution_ps(&self) -> u32 {
        self.resolution_ps
    }
    pub fn channel_count(&self) -> u16 {
        self.channel_count
    }
    pub fn records(&self) -> &[TagRecord] {
        &self.records
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Timestamps of one channel in picoseconds.
    pub fn channel_times_ps(&self, channel: u16) -> Vec<i64> {
        let res = self.resolution_ps as i64;
        self.records
            .iter()
            .filter(|r| r.channel == channel)
            .map(|r| r.timestamp as i64 * res)
            .collect()
    }

    pub fn count(&self, channel: u16) -> usize {
        self.records.iter().filter(|r| r.channel == channel).count()
    }

    /// Time-translated copy.
    pub fn shifted(&self, ticks: u64) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                r.timestamp
                    .checked_add(ticks)
                    .map(|timestamp| TagRecord { timestamp, channel: r.channel })
                    .ok_or_else(|| Error::Domain("shift overflows the tick range".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, ..self.clone() })
    }

    /// Copy with channels renamed through `map` (index = old channel).
    pub fn relabeled(&self, map: &[u16]) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| TagRecord { timestamp: r.timestamp, channel: map[r.channel as usize] })
            .collect();
        let count = map.iter().copied().max().map_or(0, |m| m + 1).max(self.channel_count);
        Self::from_unsorted(self.resolution_ps, count, records)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.records.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(MAGIC);
        header[4..6].copy_from_slice(&VERSION.to_le_bytes());
        header[6..10].copy_from_slice(&self.resolution_ps.to_le_bytes());
        header[10..12].copy_from_slice(&self.channel_count.to_le_bytes());
        header[12..20].copy_from_slice(&(self.records.len() as u64).to_le_bytes());
        w.write_all(&header)?;
        let mut rec = [0u8; RECORD_LEN];
        for r in &self.records {
            rec[0..8].copy_from_slice(&r.timestamp.to_le_bytes());
            rec[8..10].copy_from_slice(&r.channel.to_le_bytes());
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("file too short for header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic, expected QTAG".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let resolution_ps = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let channel_count = u16::from_le_bytes([bytes[10], bytes[11]]);
        let record_count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if bytes[20..HEADER_LEN].iter().any(|&b| b != 0) {
            return Err(Error::Format("non-zero header padding".into()));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != record_count.saturating_mul(RECORD_LEN as u64) {
            return Err(Error::Format(format!(
                "header declares {record_count} records but body holds {} bytes",
                body.len()
            )));
        }
        let records = body
            .chunks_exact(RECORD_LEN)
            .map(|c| TagRecord {
                timestamp: u64::from_le_bytes(c[0..8].try_into().unwrap()),
                channel: u16::from_le_bytes([c[8], c[9]]),
            })
            .collect();
        Self::new(resolution_ps, channel_count, records)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))?;
        Ok(())
    }

    /// SHA-256 of the serialized stream, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
