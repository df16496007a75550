//! Binary weight format and the length-prefixed message protocol spoken
//! between clients and the combiner.
//!
//! Frame: `u32 LE body length | u8 tag | body`. All integers and floats are
//! little-endian; strings are `u16 length | UTF-8 bytes`; weight blobs are
//! embedded as `u32 length | blob bytes`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::metrics::RoundMetrics;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const MAGIC: &[u8; 4] = b"FBW1";
pub const BLOB_VERSION: u16 = 1;
pub const MAX_FRAME: usize = 512 * 1024 * 1024;
pub const DEFAULT_PORT: u16 = 7177;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("format: {0}")]
    Format(String),
    #[error("truncated input at byte offset {offset}")]
    Truncation { offset: usize },
    #[error("{count} trailing bytes after offset {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("unsupported blob version {0}")]
    Version(u16),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME} byte limit")]
    Oversize(usize),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("peer closed the connection mid-frame")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

impl ProtocolError {
    /// Whether the stream is still aligned on a frame boundary.
    pub fn connection_usable(&self) -> bool {
        matches!(
            self,
            ProtocolError::UnknownTag(_)
                | ProtocolError::Format(_)
                | ProtocolError::Truncation { .. }
                | ProtocolError::Trailing { .. }
                | ProtocolError::Version(_)
        )
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Truncation { offset: self.pos });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ProtocolError::Format(format!("invalid UTF-8 string at offset {at}")))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            count => Err(ProtocolError::Trailing {
                offset: self.pos,
                count,
            }),
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = u16::try_from(bytes.len()).expect("string longer than 65535 bytes");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// Exact serialized size, header included.
pub fn serialized_len(w: &ModelWeights) -> usize {
    10 + w
        .iter()
        .map(|(name, t)| 2 + name.len() + 1 + 4 * t.shape().len() + 4 * t.len())
        .sum::<usize>()
}

pub fn serialize_weights(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_len(w));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for (name, t) in w.iter() {
        put_str(&mut out, name);
        out.push(u8::try_from(t.shape().len()).expect("more than 255 dimensions"));
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut c = Cursor::new(bytes);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ProtocolError::Format("bad magic, expected FBW1".into()));
    }
    c.take(4)?;
    let version = c.u16()?;
    if version != BLOB_VERSION {
        return Err(ProtocolError::Version(version));
    }
    let count = c.u32()?;
    let mut w = ModelWeights::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u8()? as usize;
        if ndim == 0 {
            return Err(ProtocolError::Format(format!(
                "tensor {name:?} has no dimensions"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = c.u32()? as usize;
            if d == 0 {
                return Err(ProtocolError::Format(format!(
                    "tensor {name:?} has a zero dimension"
                )));
            }
            len = len
                .checked_mul(d)
                .filter(|&l| l <= bytes.len() / 4)
                .ok_or(ProtocolError::Truncation { offset: c.pos })?;
            shape.push(d);
        }
        let payload = c.take(4 * len)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(shape, data).expect("length matches shape");
        w.insert(name.clone(), t)
            .map_err(|_| ProtocolError::Format(format!("duplicate tensor {name:?}")))?;
    }
    c.finish()?;
    Ok(w)
}

/// Hyper-parameters broadcast with each round. Zero epochs/batch or a zero
/// learning rate mean "use the client's own setting".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundHyper {
    pub epochs: u32,
    pub lr: f64,
    pub batch: u32,
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join {
        client_id: String,
        n_k: u64,
    },
    RoundStart {
        t: u32,
        hyper: RoundHyper,
        blob: Vec<u8>,
    },
    Update {
        client_id: String,
        t: u32,
        n_k: u64,
        train_loss: f64,
        train_acc: f64,
        val_loss: f64,
        val_acc: f64,
        blob: Vec<u8>,
    },
    RoundResult {
        t: u32,
        blob: Vec<u8>,
        metrics: RoundMetrics,
    },
    Heartbeat,
    Error {
        code: u16,
        text: String,
    },
}

pub mod error_code {
    pub const BAD_VERSION: u16 = 1;
    pub const NUMERIC: u16 = 2;
    pub const STALE_ROUND: u16 = 3;
    pub const PROTOCOL: u16 = 4;
    pub const DATA: u16 = 5;
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Join { .. } => 1,
            Message::RoundStart { .. } => 2,
            Message::Update { .. } => 3,
            Message::RoundResult { .. } => 4,
            Message::Heartbeat => 5,
            Message::Error { .. } => 6,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Join { client_id, n_k } => {
                put_str(&mut out, client_id);
                out.extend_from_slice(&n_k.to_le_bytes());
            }
            Message::RoundStart { t, hyper, blob } => {
                out.extend_from_slice(&t.to_le_bytes());
                out.extend_from_slice(&hyper.epochs.to_le_bytes());
                out.extend_from_slice(&hyper.lr.to_le_bytes());
                out.extend_from_slice(&hyper.batch.to_le_bytes());
                out.extend_from_slice(&hyper.deadline_ms.to_le_bytes());
                put_bytes(&mut out, blob);
            }
            Message::Update {
                client_id,
                t,
                n_k,
                train_loss,
                train_acc,
                val_loss,
                val_acc,
                blob,
            } => {
                put_str(&mut out, client_id);
                out.extend_from_slice(&t.to_le_bytes());
                out.extend_from_slice(&n_k.to_le_bytes());
                for v in [train_loss, train_acc, val_loss, val_acc] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_bytes(&mut out, blob);
            }
            Message::RoundResult { t, blob, metrics } => {
                out.extend_from_slice(&t.to_le_bytes());
                put_bytes(&mut out, blob);
                out.extend_from_slice(&metrics.n_received.to_le_bytes());
                for v in [
                    metrics.mean_train_acc,
                    metrics.mean_val_acc,
                    metrics.mean_train_loss,
                    metrics.mean_val_loss,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Heartbeat => {}
            Message::Error { code, text } => {
                out.extend_from_slice(&code.to_le_bytes());
                put_str(&mut out, text);
            }
        }
        out
    }

    pub fn decode(tag: u8, body: &[u8]) -> Result<Message> {
        let mut c = Cursor::new(body);
        let msg = match tag {
            1 => Message::Join {
                client_id: c.string()?,
                n_k: c.u64()?,
            },
            2 => Message::RoundStart {
                t: c.u32()?,
                hyper: RoundHyper {
                    epochs: c.u32()?,
                    lr: c.f64()?,
                    batch: c.u32()?,
                    deadline_ms: c.u64()?,
                },
                blob: c.bytes()?,
            },
            3 => Message::Update {
                client_id: c.string()?,
                t: c.u32()?,
                n_k: c.u64()?,
                train_loss: c.f64()?,
                train_acc: c.f64()?,
                val_loss: c.f64()?,
                val_acc: c.f64()?,
                blob: c.bytes()?,
            },
            4 => {
                let t = c.u32()?;
                let blob = c.bytes()?;
                let metrics = RoundMetrics {
                    t,
                    n_received: c.u32()?,
                    mean_train_acc: c.f64()?,
                    mean_val_acc: c.f64()?,
                    mean_train_loss: c.f64()?,
                    mean_val_loss: c.f64()?,
                    global_val_acc: None,
                    global_val_loss: None,
                };
                Message::RoundResult { t, blob, metrics }
            }
            5 => Message::Heartbeat,
            6 => Message::Error {
                code: c.u16()?,
                text: c.string()?,
            },
            other => return Err(ProtocolError::UnknownTag(other)),
        };
        c.finish()?;
        Ok(msg)
    }
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    let body = msg.encode_body();
    if body.len() > MAX_FRAME {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut frame = Vec::with_capacity(5 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.push(msg.tag());
    frame.extend_from_slice(&body);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean close at a frame boundary.
///
/// Unknown tags and malformed bodies are reported after the whole frame has
/// been consumed, so the caller may keep using the connection. Oversized
/// frames are rejected before any allocation and leave the stream unusable.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; 5];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Disconnected),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Disconnected,
        _ => e.into(),
    })?;
    Message::decode(header[4], &body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_weights_header() {
        let bytes = serialize_weights(&ModelWeights::new());
        assert_eq!(bytes, b"FBW1\x01\x00\x00\x00\x00\x00");
        assert!(deserialize_weights(&bytes).unwrap().is_empty());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = serialize_weights(&ModelWeights::new());
        bytes.push(0);
        assert!(matches!(
            deserialize_weights(&bytes),
            Err(ProtocolError::Trailing {
                offset: 10,
                count: 1
            })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = serialize_weights(&ModelWeights::new());
        bytes[4] = 9;
        assert!(matches!(
            deserialize_weights(&bytes),
            Err(ProtocolError::Version(9))
        ));
    }

    #[test]
    fn huge_declared_dims_do_not_allocate() {
        let mut bytes = b"FBW1\x01\x00\x01\x00\x00\x00".to_vec();
        bytes.extend_from_slice(&[1, 0, b'a', 2]);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            deserialize_weights(&bytes),
            Err(ProtocolError::Truncation { .. })
        ));
    }
}
