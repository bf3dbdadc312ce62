//! Frame transcripts captured at the generator and the privacy auditor.

use std::collections::HashSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mixture::Sample;

use super::{decode, MsgType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Node to generator.
    Inbound = 0,
    /// Generator to node.
    Outbound = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    /// Node on the other end of the frame.
    pub endpoint: u16,
    pub frame: Vec<u8>,
}

/// Append-only record of every frame crossing the generator boundary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, direction: Direction, endpoint: u16, frame: &[u8]) {
        self.entries.push(TranscriptEntry {
            direction,
            endpoint,
            frame: frame.to_vec(),
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.frame.len() as u64).sum()
    }

    pub fn bytes(&self, direction: Direction, endpoint: u16) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction && e.endpoint == endpoint)
            .map(|e| e.frame.len() as u64)
            .sum()
    }

    /// Number of frames of `kind` in `direction`.
    pub fn count(&self, direction: Direction, kind: MsgType) -> usize {
        self.entries
            .iter()
            .filter(|e| e.direction == direction && e.frame.get(5) == Some(&(kind as u8)))
            .count()
    }
}

/// Dump layout, per entry: `u32 frame_len, u8 direction, u16 endpoint, frame bytes`.
pub fn write_transcript<W: Write>(out: &mut W, t: &Transcript) -> Result<()> {
    for e in &t.entries {
        out.write_all(&(e.frame.len() as u32).to_le_bytes())?;
        out.write_all(&[e.direction as u8])?;
        out.write_all(&e.endpoint.to_le_bytes())?;
        out.write_all(&e.frame)?;
    }
    Ok(())
}

pub fn read_transcript<R: Read>(input: &mut R) -> Result<Transcript> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut t = Transcript::new();
    let mut pos = 0;
    let bad = || Error::Config("truncated transcript dump".into());
    while pos < buf.len() {
        let head = buf.get(pos..pos + 7).ok_or_else(bad)?;
        let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
        let direction = match head[4] {
            0 => Direction::Inbound,
            1 => Direction::Outbound,
            d => return Err(Error::Config(format!("bad transcript direction {d}"))),
        };
        let endpoint = u16::from_le_bytes([head[5], head[6]]);
        let frame = buf.get(pos + 7..pos + 7 + len).ok_or_else(bad)?;
        t.record(direction, endpoint, frame);
        pos += 7 + len;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub frame_index: usize,
    pub reason: String,
}

const INBOUND_ALLOWED: [MsgType; 4] = [MsgType::Join, MsgType::AuxBatch, MsgType::FakeGrad, MsgType::DLoss];

/// Checks that the generator never received anything but the allowed
/// inbound message types, and that no inbound tensor reproduces real sample
/// values. An empty result means the transcript is compliant.
pub fn audit_privacy(transcript: &Transcript, real: &[Sample]) -> Vec<Violation> {
    let real_bits: HashSet<u32> = real.iter().map(|s| s.y.to_bits()).collect();
    let mut out = Vec::new();
    for (i, e) in transcript.entries.iter().enumerate() {
        let msg = match decode(&e.frame) {
            Ok(m) => m,
            Err(err) => {
                out.push(Violation {
                    frame_index: i,
                    reason: format!("undecodable frame: {err}"),
                });
                continue;
            }
        };
        if e.direction == Direction::Outbound {
            continue;
        }
        let kind = msg.msg_type();
        if !INBOUND_ALLOWED.contains(&kind) {
            out.push(Violation {
                frame_index: i,
                reason: format!("generator received a {kind:?} frame"),
            });
        }
        if let Some(t) = msg.payload.tensor() {
            if !real_bits.is_empty() && t.data().iter().all(|v| real_bits.contains(&v.to_bits())) {
                out.push(Violation {
                    frame_index: i,
                    reason: format!("{kind:?} payload reproduces {} real sample values", t.len()),
                });
            }
        }
    }
    out
}
