//! On-disk record framing.
//!
//! All integers little-endian. One record:
//!
//! ```text
//! off  size  field
//!   0     4  body_len       bytes that follow this field (48 + key_len + payload_len)
//!   4     8  shard_seq
//!  12     8  per_key_version
//!  20     8  timestamp_us
//!  28     8  prev_offset    i64; file offset of the previous record of the same key, or -1
//!  36     4  key_len
//!  40     k  key            UTF-8 full key
//!  40+k   4  payload_len
//!  44+k   p  payload
//!  44+k+p 8  checksum       FNV-1a over bytes [0, 44+k+p)
//! ```
//!
//! Records are back to back with no file header; the first record starts at
//! offset 0.

use bytes::{BufMut, Bytes};

use crate::hash::Fnv1a;
use crate::model::{ObjectKey, Version};

pub const NO_PREV: i64 = -1;
/// Fixed bytes per record besides key and payload.
pub const RECORD_OVERHEAD: usize = 52;
const HEADER_LEN: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub key: String,
    pub payload: Bytes,
    pub version: Version,
    pub prev_offset: i64,
}

impl LogRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.key.len() + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        let body_len = (self.encoded_len() - 4) as u32;
        out.reserve(self.encoded_len());
        out.put_u32_le(body_len);
        out.put_u64_le(self.version.shard_seq);
        out.put_u64_le(self.version.per_key_version);
        out.put_u64_le(self.version.timestamp_us);
        out.put_i64_le(self.prev_offset);
        out.put_u32_le(self.key.len() as u32);
        out.put_slice(self.key.as_bytes());
        out.put_u32_le(self.payload.len() as u32);
        out.put_slice(&self.payload);
        let mut h = Fnv1a::new();
        h.update(&out[start..]);
        out.put_u64_le(h.finish().value());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut v);
        v
    }

    /// Rebuilds the key given the owning pool path.
    pub fn object_key(&self, pool_path: &str) -> crate::Result<ObjectKey> {
        let suffix = self
            .key
            .strip_prefix(pool_path)
            .and_then(|s| s.strip_prefix('/'))
            .unwrap_or("");
        ObjectKey::compose(pool_path, suffix)
    }
}

/// Why a decode stopped.
#[derive(Debug, PartialEq, Eq)]
pub enum DecodeError {
    /// Fewer bytes than the frame claims (a torn tail).
    Truncated,
    /// The frame is complete but its checksum or layout is wrong.
    Corrupt(&'static str),
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Decodes the record at the start of `buf`, returning it and its length.
pub fn decode(buf: &[u8]) -> Result<(LogRecord, usize), DecodeError> {
    if buf.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    let body_len = u32_at(buf, 0) as usize;
    if body_len < RECORD_OVERHEAD - 4 {
        return Err(DecodeError::Corrupt("frame shorter than fixed header"));
    }
    let total = body_len + 4;
    if buf.len() < total {
        return Err(DecodeError::Truncated);
    }
    let frame = &buf[..total];
    let mut h = Fnv1a::new();
    h.update(&frame[..total - 8]);
    if h.finish().value() != u64_at(frame, total - 8) {
        return Err(DecodeError::Corrupt("checksum mismatch"));
    }
    let key_len = u32_at(frame, 36) as usize;
    if HEADER_LEN + key_len + 4 + 8 > total {
        return Err(DecodeError::Corrupt("key length overruns frame"));
    }
    let key = std::str::from_utf8(&frame[HEADER_LEN..HEADER_LEN + key_len])
        .map_err(|_| DecodeError::Corrupt("key is not UTF-8"))?
        .to_string();
    let p_at = HEADER_LEN + key_len;
    let payload_len = u32_at(frame, p_at) as usize;
    if p_at + 4 + payload_len + 8 != total {
        return Err(DecodeError::Corrupt("payload length disagrees with frame"));
    }
    let payload = Bytes::copy_from_slice(&frame[p_at + 4..p_at + 4 + payload_len]);
    let version = Version {
        shard_seq: u64_at(frame, 4),
        per_key_version: u64_at(frame, 12),
        timestamp_us: u64_at(frame, 20),
    };
    let prev_offset = u64_at(frame, 28) as i64;
    Ok((
        LogRecord {
            key,
            payload,
            version,
            prev_offset,
        },
        total,
    ))
}
