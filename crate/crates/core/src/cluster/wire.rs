//! Length-prefixed binary frames shared by every transport.
//!
//! All integers are big-endian. Layout:
//!
//! ```text
//! u32 length            bytes after this field
//! u8  kind
//! u64 request_id
//! u64 key
//! u16 origin
//! u16 candidate_count
//! u16 candidate * candidate_count
//! ... kind-specific body
//! ```
//!
//! | kind | frame          | body                                              |
//! |------|----------------|---------------------------------------------------|
//! | 1    | Request        | empty                                             |
//! | 2    | Forward        | u8 hop                                            |
//! | 3    | Data           | u8 hop, u32 crc32(payload), payload               |
//! | 4    | Failure        | empty                                             |
//! | 16   | StealRequest   | empty (origin = thief)                            |
//! | 17   | StealResponse  | u8 present, then u32 r0 r1 c0 c1, u16 level       |
//! | 18   | Completions    | u32 count, then (u32 i, u32 j) * count            |
//! | 19   | Terminate      | empty                                             |
//! | 20   | NodeReport     | UTF-8 JSON                                        |
//! | 21   | Hello          | u16 cluster size                                  |
//!
//! Only `Forward` uses the candidate list. Data payloads are always
//! preprocessed items.

use thiserror::Error;

use crate::app::{ItemData, ItemKey, Stage};
use crate::dist::{CacheMessage, NodeId};
use crate::sched::{Region, TaskNode};

pub const HEADER_LEN: usize = 1 + 8 + 8 + 2 + 2;
/// Upper bound on a single frame; larger lengths are treated as corruption.
pub const MAX_FRAME: usize = 1 << 30;

const KIND_REQUEST: u8 = 1;
const KIND_FORWARD: u8 = 2;
const KIND_DATA: u8 = 3;
const KIND_FAILURE: u8 = 4;
const KIND_STEAL_REQUEST: u8 = 16;
const KIND_STEAL_RESPONSE: u8 = 17;
const KIND_COMPLETIONS: u8 = 18;
const KIND_TERMINATE: u8 = 19;
const KIND_NODE_REPORT: u8 = 20;
const KIND_HELLO: u8 = 21;

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Cache(CacheMessage),
    StealRequest {
        request_id: u64,
        thief: NodeId,
    },
    StealResponse {
        request_id: u64,
        victim: NodeId,
        task: Option<TaskNode>,
    },
    Completions {
        from: NodeId,
        pairs: Vec<(u32, u32)>,
    },
    Terminate {
        from: NodeId,
    },
    NodeReport {
        from: NodeId,
        json: String,
    },
    Hello {
        from: NodeId,
        p: u16,
    },
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::Cache(CacheMessage::Request { .. }) => KIND_REQUEST,
            Frame::Cache(CacheMessage::Forward { .. }) => KIND_FORWARD,
            Frame::Cache(CacheMessage::Data { .. }) => KIND_DATA,
            Frame::Cache(CacheMessage::Failure { .. }) => KIND_FAILURE,
            Frame::StealRequest { .. } => KIND_STEAL_REQUEST,
            Frame::StealResponse { .. } => KIND_STEAL_RESPONSE,
            Frame::Completions { .. } => KIND_COMPLETIONS,
            Frame::Terminate { .. } => KIND_TERMINATE,
            Frame::NodeReport { .. } => KIND_NODE_REPORT,
            Frame::Hello { .. } => KIND_HELLO,
        }
    }

    pub fn is_cache(&self) -> bool {
        matches!(self, Frame::Cache(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame length {0} out of range")]
    BadLength(usize),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

struct Header {
    kind: u8,
    request_id: u64,
    key: u64,
    origin: u16,
    candidates: Vec<u16>,
}

/// Encodes a frame including its length prefix.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = vec![0u8; 4];
    let (request_id, key, origin, candidates): (u64, u64, u16, &[u16]) = match frame {
        Frame::Cache(m) => {
            let cands: &[u16] = match m {
                CacheMessage::Forward { remaining, .. } => remaining,
                _ => &[],
            };
            (m.request_id(), m.key().0 as u64, m.origin(), cands)
        }
        Frame::StealRequest { request_id, thief } => (*request_id, 0, *thief, &[]),
        Frame::StealResponse {
            request_id, victim, ..
        } => (*request_id, 0, *victim, &[]),
        Frame::Completions { from, .. }
        | Frame::Terminate { from }
        | Frame::NodeReport { from, .. }
        | Frame::Hello { from, .. } => (0, 0, *from, &[]),
    };
    out.push(frame.kind());
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(&key.to_be_bytes());
    out.extend_from_slice(&origin.to_be_bytes());
    out.extend_from_slice(&(candidates.len() as u16).to_be_bytes());
    for c in candidates {
        out.extend_from_slice(&c.to_be_bytes());
    }
    match frame {
        Frame::Cache(CacheMessage::Forward { hop, .. }) => out.push(*hop),
        Frame::Cache(CacheMessage::Data { hop, payload, .. }) => {
            out.push(*hop);
            out.extend_from_slice(&crc32fast::hash(payload.payload()).to_be_bytes());
            out.extend_from_slice(payload.payload());
        }
        Frame::StealResponse { task, .. } => match task {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                for v in [t.region.r0, t.region.r1, t.region.c0, t.region.c1] {
                    out.extend_from_slice(&v.to_be_bytes());
                }
                out.extend_from_slice(&t.level.to_be_bytes());
            }
        },
        Frame::Completions { pairs, .. } => {
            out.extend_from_slice(&(pairs.len() as u32).to_be_bytes());
            for (i, j) in pairs {
                out.extend_from_slice(&i.to_be_bytes());
                out.extend_from_slice(&j.to_be_bytes());
            }
        }
        Frame::NodeReport { json, .. } => out.extend_from_slice(json.as_bytes()),
        Frame::Hello { p, .. } => out.extend_from_slice(&p.to_be_bytes()),
        _ => {}
    }
    let len = (out.len() - 4) as u32;
    out[..4].copy_from_slice(&len.to_be_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }
    fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes"))
        }
    }
}

/// Decodes one frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Frame, WireError> {
    let mut c = Cursor { buf: body };
    let kind = c.u8()?;
    let request_id = c.u64()?;
    let key = c.u64()?;
    let origin = c.u16()?;
    let count = c.u16()? as usize;
    let mut candidates = Vec::with_capacity(count);
    for _ in 0..count {
        candidates.push(c.u16()?);
    }
    let h = Header {
        kind,
        request_id,
        key,
        origin,
        candidates,
    };
    let key = || -> Result<ItemKey, WireError> {
        u32::try_from(h.key)
            .map(ItemKey)
            .map_err(|_| WireError::Malformed("key out of range"))
    };
    let frame = match h.kind {
        KIND_REQUEST => Frame::Cache(CacheMessage::Request {
            request_id: h.request_id,
            key: key()?,
            origin: h.origin,
        }),
        KIND_FORWARD => Frame::Cache(CacheMessage::Forward {
            request_id: h.request_id,
            key: key()?,
            origin: h.origin,
            hop: c.u8()?,
            remaining: h.candidates.clone(),
        }),
        KIND_DATA => {
            let hop = c.u8()?;
            let crc = c.u32()?;
            let payload = c.rest();
            if crc32fast::hash(payload) != crc {
                return Err(WireError::Checksum);
            }
            Frame::Cache(CacheMessage::Data {
                request_id: h.request_id,
                key: key()?,
                origin: h.origin,
                hop,
                payload: ItemData::new(Stage::Preprocessed, payload.to_vec()),
            })
        }
        KIND_FAILURE => Frame::Cache(CacheMessage::Failure {
            request_id: h.request_id,
            key: key()?,
            origin: h.origin,
        }),
        KIND_STEAL_REQUEST => Frame::StealRequest {
            request_id: h.request_id,
            thief: h.origin,
        },
        KIND_STEAL_RESPONSE => {
            let task = match c.u8()? {
                0 => None,
                1 => {
                    let (r0, r1, c0, c1) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
                    if r0 >= r1 || c0 >= c1 {
                        return Err(WireError::Malformed("empty region"));
                    }
                    Some(TaskNode {
                        region: Region { r0, r1, c0, c1 },
                        level: c.u16()?,
                    })
                }
                _ => return Err(WireError::Malformed("bad task flag")),
            };
            Frame::StealResponse {
                request_id: h.request_id,
                victim: h.origin,
                task,
            }
        }
        KIND_COMPLETIONS => {
            let n = c.u32()? as usize;
            if n.saturating_mul(8) > c.buf.len() {
                return Err(WireError::Truncated);
            }
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                pairs.push((c.u32()?, c.u32()?));
            }
            Frame::Completions {
                from: h.origin,
                pairs,
            }
        }
        KIND_TERMINATE => Frame::Terminate { from: h.origin },
        KIND_NODE_REPORT => Frame::NodeReport {
            from: h.origin,
            json: String::from_utf8(c.rest().to_vec())
                .map_err(|_| WireError::Malformed("report is not UTF-8"))?,
        },
        KIND_HELLO => Frame::Hello {
            from: h.origin,
            p: c.u16()?,
        },
        other => return Err(WireError::UnknownKind(other)),
    };
    if !h.candidates.is_empty() && h.kind != KIND_FORWARD {
        return Err(WireError::Malformed("candidates on a non-forward frame"));
    }
    c.finish()?;
    Ok(frame)
}

/// Decodes a complete frame including its length prefix.
pub fn decode(buf: &[u8]) -> Result<Frame, WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
        return Err(WireError::BadLength(len));
    }
    if buf.len() != 4 + len {
        return Err(if buf.len() < 4 + len {
            WireError::Truncated
        } else {
            WireError::Malformed("trailing bytes")
        });
    }
    decode_body(&buf[4..])
}

/// Reads one frame from a stream. `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl std::io::Read) -> std::io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            WireError::BadLength(len),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
