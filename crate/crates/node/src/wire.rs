//! Length-prefixed little-endian frames for client and peer traffic.
//!
//! Every frame is
//!
//! ```text
//! u32  len        number of bytes that follow (type byte + body)
//! u8   type
//! ...  body
//! ```
//!
//! Body fields are packed with no padding. `str` and `bytes` are a `u32`
//! length followed by that many bytes (`str` is UTF-8). `version` is three
//! `u64`s: per_key_version, shard_seq, timestamp_us. `shard` is a `str` pool
//! path followed by a `u32` shard index.
//!
//! A connection opens with a 4-byte magic: `KVCL` for clients, or `KVPR`
//! followed by the dialing node's `u32` id for peers. Peer links are one-way:
//! each node dials every other node and only sends on the links it dialed.
//!
//! Client requests (every request starts with a `u64` correlation id that
//! the matching response echoes):
//!
//! | type | frame          | body after corr                          |
//! |------|----------------|------------------------------------------|
//! | 0x01 | PUT            | key: str, payload: bytes                 |
//! | 0x02 | TRIGGER_PUT    | key: str, payload: bytes                 |
//! | 0x03 | GET            | key: str                                 |
//! | 0x04 | GET_BY_VERSION | key: str, version: u64                   |
//! | 0x05 | GET_BY_TIME    | key: str, t_us: u64                      |
//! | 0x06 | SUBSCRIBE      | topic: str                               |
//! | 0x07 | PUBLISH        | topic: str, persistence: u8, payload: bytes |
//! | 0x08 | VIEW           | (empty)                                  |
//!
//! `persistence` is 0 for volatile and 1 for persistent.
//!
//! Responses:
//!
//! | type | frame   | body after corr                                        |
//! |------|---------|--------------------------------------------------------|
//! | 0x81 | PUT_OK  | version, then five u64 ns: residence, queue, multicast, processing, persistence |
//! | 0x82 | OBJECT  | key: str, version, payload: bytes                      |
//! | 0x83 | ACK     | (empty)                                                |
//! | 0x84 | ERROR   | code: u16, message: str                                |
//! | 0x85 | NOTIFY  | topic: str, seq: u64, version, payload: bytes          |
//! | 0x86 | VIEW_OK | view as JSON: str                                      |
//!
//! A NOTIFY carries the SUBSCRIBE's correlation id and `seq` equal to the
//! topic's per-key version.
//!
//! Peer frames:
//!
//! | type | frame       | body                                                   |
//! |------|-------------|--------------------------------------------------------|
//! | 0x41 | HELLO       | from: u32, n: u32, n × (shard, last_seq: u64, last_ts: u64) |
//! | 0x42 | MCAST       | shard, seq: u64, ts: u64, sender: u32, key: str, payload: bytes |
//! | 0x43 | MCAST_ACK   | shard, from: u32, seq: u64                             |
//! | 0x44 | PERSIST_ACK | shard, from: u32, seq: u64                             |
//! | 0x45 | TRIG        | key: str, payload: bytes                               |
//! | 0x46 | GAP_REQ     | shard, from: u32, from_seq: u64                        |
//! | 0x47 | GAP_END     | shard, from: u32, last_seq: u64                        |
//! | 0x48 | HEARTBEAT   | from: u32, view_id: u64                                |
//!
//! Acks are cumulative: `seq` is the highest sequence number applied (or made
//! durable) by `from`.

use std::io::{self, Read, Write};

use bytes::{Buf, BufMut, Bytes, BytesMut};
use kvflow_core::{Error, Persistence, Result, Version};

pub const CLIENT_MAGIC: [u8; 4] = *b"KVCL";
pub const PEER_MAGIC: [u8; 4] = *b"KVPR";

/// Largest frame accepted from the network.
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShardId {
    pub pool: String,
    pub shard: u32,
}

impl ShardId {
    pub fn new(pool: &str, shard: u32) -> Self {
        ShardId {
            pool: pool.to_string(),
            shard,
        }
    }
}

impl std::fmt::Display for ShardId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.pool, self.shard)
    }
}

/// Server-side put timing, all in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServerTiming {
    /// Receipt of the request to sending the reply.
    pub residence_ns: u64,
    /// Waiting for a sequence number.
    pub queue_ns: u64,
    /// Sequencing until every member applied, less local processing.
    pub multicast_ns: u64,
    /// Applying the update at the sequencer.
    pub processing_ns: u64,
    /// All members applied until all members made it durable.
    pub persistence_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Put {
        corr: u64,
        key: String,
        payload: Bytes,
    },
    TriggerPut {
        corr: u64,
        key: String,
        payload: Bytes,
    },
    Get {
        corr: u64,
        key: String,
    },
    GetByVersion {
        corr: u64,
        key: String,
        version: u64,
    },
    GetByTime {
        corr: u64,
        key: String,
        t_us: u64,
    },
    Subscribe {
        corr: u64,
        topic: String,
    },
    Publish {
        corr: u64,
        topic: String,
        persistence: Persistence,
        payload: Bytes,
    },
    View {
        corr: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    PutOk {
        corr: u64,
        version: Version,
        timing: ServerTiming,
    },
    Object {
        corr: u64,
        key: String,
        version: Version,
        payload: Bytes,
    },
    Ack {
        corr: u64,
    },
    Error {
        corr: u64,
        code: u16,
        message: String,
    },
    Notify {
        corr: u64,
        topic: String,
        seq: u64,
        version: Version,
        payload: Bytes,
    },
    ViewOk {
        corr: u64,
        json: String,
    },
}

impl Response {
    pub fn corr(&self) -> u64 {
        match self {
            Response::PutOk { corr, .. }
            | Response::Object { corr, .. }
            | Response::Ack { corr }
            | Response::Error { corr, .. }
            | Response::Notify { corr, .. }
            | Response::ViewOk { corr, .. } => *corr,
        }
    }

    pub fn error(corr: u64, e: &Error) -> Self {
        Response::Error {
            corr,
            code: e.code(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mcast {
    pub shard: ShardId,
    pub seq: u64,
    pub ts: u64,
    pub sender: u32,
    pub key: String,
    pub payload: Bytes,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloShard {
    pub shard: ShardId,
    pub last_seq: u64,
    pub last_ts: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PeerMsg {
    Hello {
        from: u32,
        shards: Vec<HelloShard>,
    },
    Mcast(Mcast),
    McastAck {
        shard: ShardId,
        from: u32,
        seq: u64,
    },
    PersistAck {
        shard: ShardId,
        from: u32,
        seq: u64,
    },
    Trig {
        key: String,
        payload: Bytes,
    },
    GapReq {
        shard: ShardId,
        from: u32,
        from_seq: u64,
    },
    GapEnd {
        shard: ShardId,
        from: u32,
        last_seq: u64,
    },
    Heartbeat {
        from: u32,
        view_id: u64,
    },
}

mod ty {
    pub const PUT: u8 = 0x01;
    pub const TRIGGER_PUT: u8 = 0x02;
    pub const GET: u8 = 0x03;
    pub const GET_BY_VERSION: u8 = 0x04;
    pub const GET_BY_TIME: u8 = 0x05;
    pub const SUBSCRIBE: u8 = 0x06;
    pub const PUBLISH: u8 = 0x07;
    pub const VIEW: u8 = 0x08;

    pub const HELLO: u8 = 0x41;
    pub const MCAST: u8 = 0x42;
    pub const MCAST_ACK: u8 = 0x43;
    pub const PERSIST_ACK: u8 = 0x44;
    pub const TRIG: u8 = 0x45;
    pub const GAP_REQ: u8 = 0x46;
    pub const GAP_END: u8 = 0x47;
    pub const HEARTBEAT: u8 = 0x48;

    pub const PUT_OK: u8 = 0x81;
    pub const OBJECT: u8 = 0x82;
    pub const ACK: u8 = 0x83;
    pub const ERROR: u8 = 0x84;
    pub const NOTIFY: u8 = 0x85;
    pub const VIEW_OK: u8 = 0x86;
}

/// Builds one frame; the length prefix is patched in by `finish`.
struct FrameBuf(BytesMut);

impl FrameBuf {
    fn new(ty: u8, body_hint: usize) -> Self {
        let mut b = BytesMut::with_capacity(5 + body_hint);
        b.put_u32_le(0);
        b.put_u8(ty);
        FrameBuf(b)
    }

    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.put_u8(v);
        self
    }

    fn u16(&mut self, v: u16) -> &mut Self {
        self.0.put_u16_le(v);
        self
    }

    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.put_u32_le(v);
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.put_u64_le(v);
        self
    }

    fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.0.put_u32_le(v.len() as u32);
        self.0.put_slice(v);
        self
    }

    fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    fn version(&mut self, v: &Version) -> &mut Self {
        self.u64(v.per_key_version)
            .u64(v.shard_seq)
            .u64(v.timestamp_us)
    }

    fn shard(&mut self, s: &ShardId) -> &mut Self {
        self.str(&s.pool).u32(s.shard)
    }

    fn finish(&mut self) -> Bytes {
        let len = (self.0.len() - 4) as u32;
        self.0[..4].copy_from_slice(&len.to_le_bytes());
        std::mem::take(&mut self.0).freeze()
    }
}

fn truncated() -> Error {
    Error::Protocol("truncated frame".into())
}

/// Cursor over a received frame body. Payload fields are sliced out of the
/// frame buffer, never copied.
struct Body(Bytes);

impl Body {
    fn need(&self, n: usize) -> Result<()> {
        if self.0.remaining() < n {
            Err(truncated())
        } else {
            Ok(())
        }
    }

    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        Ok(self.0.get_u8())
    }

    fn u16(&mut self) -> Result<u16> {
        self.need(2)?;
        Ok(self.0.get_u16_le())
    }

    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        Ok(self.0.get_u32_le())
    }

    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        Ok(self.0.get_u64_le())
    }

    fn bytes(&mut self) -> Result<Bytes> {
        let n = self.u32()? as usize;
        self.need(n)?;
        Ok(self.0.split_to(n))
    }

    fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Protocol("string is not utf-8".into()))
    }

    fn version(&mut self) -> Result<Version> {
        Ok(Version {
            per_key_version: self.u64()?,
            shard_seq: self.u64()?,
            timestamp_us: self.u64()?,
        })
    }

    fn shard(&mut self) -> Result<ShardId> {
        Ok(ShardId {
            pool: self.str()?,
            shard: self.u32()?,
        })
    }

    fn persistence(&mut self) -> Result<Persistence> {
        match self.u8()? {
            0 => Ok(Persistence::Volatile),
            1 => Ok(Persistence::Persistent),
            b => Err(Error::Protocol(format!("bad persistence byte {b}"))),
        }
    }

    fn end(self) -> Result<()> {
        if self.0.has_remaining() {
            Err(Error::Protocol(format!(
                "{} trailing bytes",
                self.0.remaining()
            )))
        } else {
            Ok(())
        }
    }
}

fn persistence_byte(p: Persistence) -> u8 {
    match p {
        Persistence::Volatile => 0,
        Persistence::Persistent => 1,
    }
}

impl Request {
    pub fn corr(&self) -> u64 {
        match self {
            Request::Put { corr, .. }
            | Request::TriggerPut { corr, .. }
            | Request::Get { corr, .. }
            | Request::GetByVersion { corr, .. }
            | Request::GetByTime { corr, .. }
            | Request::Subscribe { corr, .. }
            | Request::Publish { corr, .. }
            | Request::View { corr } => *corr,
        }
    }

    pub fn encode(&self) -> Bytes {
        match self {
            Request::Put { corr, key, payload } => {
                FrameBuf::new(ty::PUT, 16 + key.len() + payload.len())
                    .u64(*corr)
                    .str(key)
                    .bytes(payload)
                    .finish()
            }
            Request::TriggerPut { corr, key, payload } => {
                FrameBuf::new(ty::TRIGGER_PUT, 16 + key.len() + payload.len())
                    .u64(*corr)
                    .str(key)
                    .bytes(payload)
                    .finish()
            }
            Request::Get { corr, key } => FrameBuf::new(ty::GET, 12 + key.len())
                .u64(*corr)
                .str(key)
                .finish(),
            Request::GetByVersion { corr, key, version } => {
                FrameBuf::new(ty::GET_BY_VERSION, 20 + key.len())
                    .u64(*corr)
                    .str(key)
                    .u64(*version)
                    .finish()
            }
            Request::GetByTime { corr, key, t_us } => {
                FrameBuf::new(ty::GET_BY_TIME, 20 + key.len())
                    .u64(*corr)
                    .str(key)
                    .u64(*t_us)
                    .finish()
            }
            Request::Subscribe { corr, topic } => FrameBuf::new(ty::SUBSCRIBE, 12 + topic.len())
                .u64(*corr)
                .str(topic)
                .finish(),
            Request::Publish {
                corr,
                topic,
                persistence,
                payload,
            } => FrameBuf::new(ty::PUBLISH, 17 + topic.len() + payload.len())
                .u64(*corr)
                .str(topic)
                .u8(persistence_byte(*persistence))
                .bytes(payload)
                .finish(),
            Request::View { corr } => FrameBuf::new(ty::VIEW, 8).u64(*corr).finish(),
        }
    }

    pub fn decode(ty: u8, body: Bytes) -> Result<Self> {
        let mut b = Body(body);
        let corr = b.u64()?;
        let req = match ty {
            ty::PUT => Request::Put {
                corr,
                key: b.str()?,
                payload: b.bytes()?,
            },
            ty::TRIGGER_PUT => Request::TriggerPut {
                corr,
                key: b.str()?,
                payload: b.bytes()?,
            },
            ty::GET => Request::Get {
                corr,
                key: b.str()?,
            },
            ty::GET_BY_VERSION => Request::GetByVersion {
                corr,
                key: b.str()?,
                version: b.u64()?,
            },
            ty::GET_BY_TIME => Request::GetByTime {
                corr,
                key: b.str()?,
                t_us: b.u64()?,
            },
            ty::SUBSCRIBE => Request::Subscribe {
                corr,
                topic: b.str()?,
            },
            ty::PUBLISH => Request::Publish {
                corr,
                topic: b.str()?,
                persistence: b.persistence()?,
                payload: b.bytes()?,
            },
            ty::VIEW => Request::View { corr },
            t => return Err(Error::Protocol(format!("unknown request type {t:#04x}"))),
        };
        b.end()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self) -> Bytes {
        match self {
            Response::PutOk {
                corr,
                version,
                timing,
            } => FrameBuf::new(ty::PUT_OK, 72)
                .u64(*corr)
                .version(version)
                .u64(timing.residence_ns)
                .u64(timing.queue_ns)
                .u64(timing.multicast_ns)
                .u64(timing.processing_ns)
                .u64(timing.persistence_ns)
                .finish(),
            Response::Object {
                corr,
                key,
                version,
                payload,
            } => FrameBuf::new(ty::OBJECT, 40 + key.len() + payload.len())
                .u64(*corr)
                .str(key)
                .version(version)
                .bytes(payload)
                .finish(),
            Response::Ack { corr } => FrameBuf::new(ty::ACK, 8).u64(*corr).finish(),
            Response::Error {
                corr,
                code,
                message,
            } => FrameBuf::new(ty::ERROR, 14 + message.len())
                .u64(*corr)
                .u16(*code)
                .str(message)
                .finish(),
            Response::Notify {
                corr,
                topic,
                seq,
                version,
                payload,
            } => FrameBuf::new(ty::NOTIFY, 48 + topic.len() + payload.len())
                .u64(*corr)
                .str(topic)
                .u64(*seq)
                .version(version)
                .bytes(payload)
                .finish(),
            Response::ViewOk { corr, json } => FrameBuf::new(ty::VIEW_OK, 12 + json.len())
                .u64(*corr)
                .str(json)
                .finish(),
        }
    }

    pub fn decode(ty: u8, body: Bytes) -> Result<Self> {
        let mut b = Body(body);
        let corr = b.u64()?;
        let resp = match ty {
            ty::PUT_OK => Response::PutOk {
                corr,
                version: b.version()?,
                timing: ServerTiming {
                    residence_ns: b.u64()?,
                    queue_ns: b.u64()?,
                    multicast_ns: b.u64()?,
                    processing_ns: b.u64()?,
                    persistence_ns: b.u64()?,
                },
            },
            ty::OBJECT => Response::Object {
                corr,
                key: b.str()?,
                version: b.version()?,
                payload: b.bytes()?,
            },
            ty::ACK => Response::Ack { corr },
            ty::ERROR => Response::Error {
                corr,
                code: b.u16()?,
                message: b.str()?,
            },
            ty::NOTIFY => Response::Notify {
                corr,
                topic: b.str()?,
                seq: b.u64()?,
                version: b.version()?,
                payload: b.bytes()?,
            },
            ty::VIEW_OK => Response::ViewOk {
                corr,
                json: b.str()?,
            },
            t => return Err(Error::Protocol(format!("unknown response type {t:#04x}"))),
        };
        b.end()?;
        Ok(resp)
    }
}

impl PeerMsg {
    pub fn encode(&self) -> Bytes {
        match self {
            PeerMsg::Hello { from, shards } => {
                let mut f = FrameBuf::new(ty::HELLO, 8 + shards.len() * 40);
                f.u32(*from).u32(shards.len() as u32);
                for s in shards {
                    f.shard(&s.shard).u64(s.last_seq).u64(s.last_ts);
                }
                f.finish()
            }
            PeerMsg::Mcast(m) => FrameBuf::new(
                ty::MCAST,
                40 + m.shard.pool.len() + m.key.len() + m.payload.len(),
            )
            .shard(&m.shard)
            .u64(m.seq)
            .u64(m.ts)
            .u32(m.sender)
            .str(&m.key)
            .bytes(&m.payload)
            .finish(),
            PeerMsg::McastAck { shard, from, seq } => {
                FrameBuf::new(ty::MCAST_ACK, 20 + shard.pool.len())
                    .shard(shard)
                    .u32(*from)
                    .u64(*seq)
                    .finish()
            }
            PeerMsg::PersistAck { shard, from, seq } => {
                FrameBuf::new(ty::PERSIST_ACK, 20 + shard.pool.len())
                    .shard(shard)
                    .u32(*from)
                    .u64(*seq)
                    .finish()
            }
            PeerMsg::Trig { key, payload } => {
                FrameBuf::new(ty::TRIG, 8 + key.len() + payload.len())
                    .str(key)
                    .bytes(payload)
                    .finish()
            }
            PeerMsg::GapReq {
                shard,
                from,
                from_seq,
            } => FrameBuf::new(ty::GAP_REQ, 20 + shard.pool.len())
                .shard(shard)
                .u32(*from)
                .u64(*from_seq)
                .finish(),
            PeerMsg::GapEnd {
                shard,
                from,
                last_seq,
            } => FrameBuf::new(ty::GAP_END, 20 + shard.pool.len())
                .shard(shard)
                .u32(*from)
                .u64(*last_seq)
                .finish(),
            PeerMsg::Heartbeat { from, view_id } => FrameBuf::new(ty::HEARTBEAT, 12)
                .u32(*from)
                .u64(*view_id)
                .finish(),
        }
    }

    pub fn decode(ty: u8, body: Bytes) -> Result<Self> {
        let mut b = Body(body);
        let msg = match ty {
            ty::HELLO => {
                let from = b.u32()?;
                let n = b.u32()? as usize;
                let mut shards = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    shards.push(HelloShard {
                        shard: b.shard()?,
                        last_seq: b.u64()?,
                        last_ts: b.u64()?,
                    });
                }
                PeerMsg::Hello { from, shards }
            }
            ty::MCAST => PeerMsg::Mcast(Mcast {
                shard: b.shard()?,
                seq: b.u64()?,
                ts: b.u64()?,
                sender: b.u32()?,
                key: b.str()?,
                payload: b.bytes()?,
            }),
            ty::MCAST_ACK => PeerMsg::McastAck {
                shard: b.shard()?,
                from: b.u32()?,
                seq: b.u64()?,
            },
            ty::PERSIST_ACK => PeerMsg::PersistAck {
                shard: b.shard()?,
                from: b.u32()?,
                seq: b.u64()?,
            },
            ty::TRIG => PeerMsg::Trig {
                key: b.str()?,
                payload: b.bytes()?,
            },
            ty::GAP_REQ => PeerMsg::GapReq {
                shard: b.shard()?,
                from: b.u32()?,
                from_seq: b.u64()?,
            },
            ty::GAP_END => PeerMsg::GapEnd {
                shard: b.shard()?,
                from: b.u32()?,
                last_seq: b.u64()?,
            },
            ty::HEARTBEAT => PeerMsg::Heartbeat {
                from: b.u32()?,
                view_id: b.u64()?,
            },
            t => return Err(Error::Protocol(format!("unknown peer frame type {t:#04x}"))),
        };
        b.end()?;
        Ok(msg)
    }
}

/// Reads one frame, returning its type byte and body. The body is a single
/// allocation that decoded payloads share. `Ok(None)` on a clean EOF at a
/// frame boundary.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u8, Bytes)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut ty = [0u8; 1];
    r.read_exact(&mut ty)?;
    let mut body = vec![0u8; len - 1];
    r.read_exact(&mut body)?;
    Ok(Some((ty[0], Bytes::from(body))))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)
}

/// Splits an encoded frame into its type byte and body.
pub fn split_frame(frame: &Bytes) -> Result<(u8, Bytes)> {
    if frame.len() < 5 {
        return Err(truncated());
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    if len + 4 != frame.len() {
        return Err(Error::Protocol(format!(
            "frame length {len} does not match {} bytes",
            frame.len() - 4
        )));
    }
    Ok((frame[4], frame.slice(5..)))
}
