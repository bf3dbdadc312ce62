//! Wire protocol between the central generator and discriminator nodes.
//!
//! Every message is one frame:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ADGN"
//! 4       1     version (1)
//! 5       1     msg_type
//! 6       2     node_id      (u16 LE)
//! 8       4     round        (u32 LE)
//! 12      4     payload_len  (u32 LE)
//! 16      n     payload
//! ```
//!
//! Tensor payloads are `u8 dtype (0 = f32), u8 ndim, u32 dims…, f32 data…`,
//! little-endian. No message type carries real training samples: nodes send
//! only auxiliary batches, gradients with respect to fake data, and losses.

mod audit;
mod cost;
mod node;
mod server;
mod transport;

pub use audit::{audit_privacy, read_transcript, write_transcript, Direction, Transcript, TranscriptEntry, Violation};
pub use cost::{comm_cost, gradient_sharing_cost, protocol_cost, ProtocolCost};
pub(crate) use node::link_error;
pub use node::{connect_tcp, run_discriminator_node, NodeSummary};
pub use server::{run_generator_server, Ledger, ServerConfig, ServerOutcome};
pub use transport::{inproc_pair, Acceptor, InProcAcceptor, InProcConnector, Link, LinkError, TcpAcceptor, TcpLink};

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"ADGN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Largest payload a decoder will accept.
pub const MAX_PAYLOAD: u32 = 64 << 20;
/// `node_id` a joining node sends when it has no preference.
pub const ANY_NODE: u16 = u16::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("payload length {0} exceeds the limit")]
    Oversized(u32),
    #[error("malformed payload: {0}")]
    BadPayload(String),
}

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MsgType {
    Join = 0,
    JoinAck = 1,
    AuxBatch = 2,
    FakeBatch = 3,
    FakeGrad = 4,
    DLoss = 5,
    RoundBegin = 6,
    Shutdown = 7,
}

impl TryFrom<u8> for MsgType {
    type Error = DecodeError;

    fn try_from(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            0 => MsgType::Join,
            1 => MsgType::JoinAck,
            2 => MsgType::AuxBatch,
            3 => MsgType::FakeBatch,
            4 => MsgType::FakeGrad,
            5 => MsgType::DLoss,
            6 => MsgType::RoundBegin,
            7 => MsgType::Shutdown,
            other => return Err(DecodeError::UnknownMsgType(other)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator = 0,
    Generator = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Size of the joining node's shard, used for the mixture weights.
    Join {
        shard_size: u32,
    },
    JoinAck {
        accepted: bool,
    },
    AuxBatch(Tensor),
    FakeBatch(Tensor),
    FakeGrad(Tensor),
    /// The node's discriminator loss and its generator-objective term.
    DLoss {
        d_loss: f32,
        g_loss: f32,
    },
    RoundBegin {
        phase: Phase,
        batch: u32,
    },
    Shutdown,
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::Join { .. } => MsgType::Join,
            Payload::JoinAck { .. } => MsgType::JoinAck,
            Payload::AuxBatch(_) => MsgType::AuxBatch,
            Payload::FakeBatch(_) => MsgType::FakeBatch,
            Payload::FakeGrad(_) => MsgType::FakeGrad,
            Payload::DLoss { .. } => MsgType::DLoss,
            Payload::RoundBegin { .. } => MsgType::RoundBegin,
            Payload::Shutdown => MsgType::Shutdown,
        }
    }

    /// The tensor carried by this payload, if any.
    pub fn tensor(&self) -> Option<&Tensor> {
        match self {
            Payload::AuxBatch(t) | Payload::FakeBatch(t) | Payload::FakeGrad(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub node_id: u16,
    pub round: u32,
    pub payload: Payload,
}

impl Message {
    pub fn new(node_id: u16, round: u32, payload: Payload) -> Self {
        Self {
            node_id,
            round,
            payload,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }
}

/// A frame with its header fields split out and the payload left raw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub node_id: u16,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    /// Validates a header and returns `(msg_type, node_id, round, payload_len)`.
    pub fn parse_header(h: &[u8]) -> Result<(u8, u16, u32, u32), DecodeError> {
        if h.len() < HEADER_LEN {
            if h.len() >= 4 && &h[..4] != MAGIC {
                return Err(DecodeError::BadMagic);
            }
            return Err(DecodeError::Truncated);
        }
        if &h[..4] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        if h[4] != VERSION {
            return Err(DecodeError::UnknownVersion(h[4]));
        }
        let node_id = u16::from_le_bytes([h[6], h[7]]);
        let round = u32::from_le_bytes([h[8], h[9], h[10], h[11]]);
        let len = u32::from_le_bytes([h[12], h[13], h[14], h[15]]);
        if len > MAX_PAYLOAD {
            return Err(DecodeError::Oversized(len));
        }
        Ok((h[5], node_id, round, len))
    }

    /// Splits one complete frame off the front of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
        let (msg_type, node_id, round, len) = Self::parse_header(bytes)?;
        let end = HEADER_LEN + len as usize;
        if bytes.len() < end {
            return Err(DecodeError::Truncated);
        }
        Ok((
            Frame {
                msg_type,
                node_id,
                round,
                payload: bytes[HEADER_LEN..end].to_vec(),
            },
            end,
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&self.node_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

const DTYPE_F32: u8 = 0;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Size in bytes of a tensor payload with this shape.
pub fn tensor_payload_len(shape: &[usize]) -> usize {
    2 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match &msg.payload {
        Payload::Join { shard_size } => payload.extend_from_slice(&shard_size.to_le_bytes()),
        Payload::JoinAck { accepted } => payload.push(u8::from(*accepted)),
        Payload::AuxBatch(t) | Payload::FakeBatch(t) | Payload::FakeGrad(t) => put_tensor(&mut payload, t),
        Payload::DLoss { d_loss, g_loss } => {
            put_tensor(&mut payload, &Tensor::from_vec(vec![*d_loss, *g_loss]));
        }
        Payload::RoundBegin { phase, batch } => {
            payload.push(*phase as u8);
            payload.extend_from_slice(&batch.to_le_bytes());
        }
        Payload::Shutdown => {}
    }
    Frame {
        msg_type: msg.msg_type() as u8,
        node_id: msg.node_id,
        round: msg.round,
        payload,
    }
    .to_bytes()
}

/// Decodes exactly one frame; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::BadPayload(format!(
            "{} bytes after frame end",
            bytes.len() - used
        )));
    }
    Ok(msg)
}

/// Decodes the frame at the front of `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    let (frame, used) = Frame::parse(bytes)?;
    Ok((decode_frame(&frame)?, used))
}

pub fn decode_frame(frame: &Frame) -> Result<Message, DecodeError> {
    let kind = MsgType::try_from(frame.msg_type)?;
    let mut r = Reader {
        buf: &frame.payload,
        pos: 0,
    };
    let payload = match kind {
        MsgType::Join => Payload::Join { shard_size: r.u32()? },
        MsgType::JoinAck => Payload::JoinAck {
            accepted: match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(DecodeError::BadPayload(format!("join status {v}"))),
            },
        },
        MsgType::AuxBatch => Payload::AuxBatch(r.tensor()?),
        MsgType::FakeBatch => Payload::FakeBatch(r.tensor()?),
        MsgType::FakeGrad => Payload::FakeGrad(r.tensor()?),
        MsgType::DLoss => {
            let t = r.tensor()?;
            if t.shape() != [2] || !t.is_finite() {
                return Err(DecodeError::BadPayload("loss report must be two finite values".into()));
            }
            Payload::DLoss {
                d_loss: t.data()[0],
                g_loss: t.data()[1],
            }
        }
        MsgType::RoundBegin => {
            let phase = match r.u8()? {
                0 => Phase::Discriminator,
                1 => Phase::Generator,
                v => return Err(DecodeError::BadPayload(format!("phase {v}"))),
            };
            Payload::RoundBegin { phase, batch: r.u32()? }
        }
        MsgType::Shutdown => Payload::Shutdown,
    };
    if r.pos != frame.payload.len() {
        return Err(DecodeError::BadPayload(format!(
            "{} unread payload bytes",
            frame.payload.len() - r.pos
        )));
    }
    Ok(Message {
        node_id: frame.node_id,
        round: frame.round,
        payload,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(DecodeError::BadPayload(format!("dtype {dtype}")));
        }
        let ndim = self.u8()? as usize;
        if ndim == 0 {
            return Err(DecodeError::BadPayload("tensor with no dimensions".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(DecodeError::BadPayload("zero extent".into()));
            }
            n = n.checked_mul(d).ok_or(DecodeError::Truncated)?;
            shape.push(d);
        }
        let bytes = self.take(n.checked_mul(4).ok_or(DecodeError::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| DecodeError::BadPayload(e.to_string()))
    }
}
