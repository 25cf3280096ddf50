//! Minimal stream multiplexer frames: varint stream id, flags byte,
//! varint length, body. No windowing or flow control.

use thiserror::Error;
use unsigned_varint::{decode, encode};

use super::multistream::Side;

pub const SYN: u8 = 0x01;
pub const FIN: u8 = 0x02;
pub const DATA: u8 = 0x04;
pub const PING: u8 = 0x08;
pub const PONG: u8 = 0x10;
const KNOWN_FLAGS: u8 = SYN | FIN | DATA | PING | PONG;

/// Stream id reserved for session-level pings.
pub const SESSION_STREAM: u64 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MuxError {
    #[error("truncated muxer frame")]
    Truncated,
    #[error("bad varint in muxer frame")]
    BadVarint,
    #[error("unknown flags 0x{0:02X}")]
    UnknownFlags(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MuxFrame {
    pub stream: u64,
    pub flags: u8,
    pub data: Vec<u8>,
}

impl MuxFrame {
    pub fn new(stream: u64, flags: u8, data: impl Into<Vec<u8>>) -> Self {
        MuxFrame { stream, flags, data: data.into() }
    }

    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let mut buf = encode::u64_buffer();
        out.extend_from_slice(encode::u64(self.stream, &mut buf));
        out.push(self.flags);
        let mut buf = encode::usize_buffer();
        out.extend_from_slice(encode::usize(self.data.len(), &mut buf));
        out.extend_from_slice(&self.data);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 8);
        self.encode_into(&mut out);
        out
    }
}

fn varint(buf: &[u8]) -> Result<(u64, &[u8]), MuxError> {
    decode::u64(buf).map_err(|e| match e {
        decode::Error::Insufficient => MuxError::Truncated,
        _ => MuxError::BadVarint,
    })
}

/// Decodes a buffer holding whole frames only.
pub fn decode_frames(mut buf: &[u8]) -> Result<Vec<MuxFrame>, MuxError> {
    let mut frames = Vec::new();
    while !buf.is_empty() {
        let (stream, rest) = varint(buf)?;
        let (&flags, rest) = rest.split_first().ok_or(MuxError::Truncated)?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(MuxError::UnknownFlags(flags));
        }
        let (len, rest) = varint(rest)?;
        let len = usize::try_from(len).map_err(|_| MuxError::BadVarint)?;
        if rest.len() < len {
            return Err(MuxError::Truncated);
        }
        frames.push(MuxFrame { stream, flags, data: rest[..len].to_vec() });
        buf = &rest[len..];
    }
    Ok(frames)
}

/// Stream ids by role: the connection initiator uses odd ids, the responder
/// even ids, both strictly increasing.
#[derive(Debug, Clone)]
pub struct StreamIdAllocator {
    next: u64,
}

impl StreamIdAllocator {
    pub fn new(side: Side) -> Self {
        StreamIdAllocator { next: if side == Side::Initiator { 1 } else { 2 } }
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 2;
        id
    }

    /// Whether `id` belongs to the other side's id space.
    pub fn is_remote(side: Side, id: u64) -> bool {
        id != SESSION_STREAM && (id % 2 == 1) != (side == Side::Initiator)
    }
}
