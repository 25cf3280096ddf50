//! Serial wire format used between the host and the mesh radio.
//!
//! A message is hex-encoded, cut into chunks of at most [`MAX_DATA_LEN`]
//! bytes and each chunk is wrapped in a frame:
//!
//! ```text
//! +--------+-----+-------+-------------+--------+-----+
//! | HEADER | DST | START | DATA        | LENGTH | END |
//! | 13     | 6   | 2     | 1..=227     | 4      | 3   |
//! +--------+-----+-------+-------------+--------+-----+
//! ```
//!
//! LENGTH and END are only present on the final segment of a message, so a
//! full final frame is exactly 255 bytes. All integers are big-endian.

use std::fmt;

use thiserror::Error;

pub const HEADER_LEN: usize = 13;
pub const DST_LEN: usize = 6;
pub const START_MARKER: [u8; 2] = [0x3C, 0x3C];
pub const END_MARKER: [u8; 3] = [0x3E, 0x3E, 0x3E];
pub const LENGTH_LEN: usize = 4;
pub const MAX_DATA_LEN: usize = 227;
pub const MAX_FRAME_LEN: usize = 255;
pub const MIN_PAYLOAD_LEN: usize = 1;
pub const MAX_PAYLOAD_LEN: usize = 2000;
pub const FRAME_VERSION: u8 = 1;
pub const FLAG_FINAL: u8 = 0x01;

/// Bytes between the start of a frame and the first DATA byte.
const PREFIX_LEN: usize = HEADER_LEN + DST_LEN + START_MARKER.len();
const TRAILER_LEN: usize = LENGTH_LEN + END_MARKER.len();

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload of {len} bytes is outside [{MIN_PAYLOAD_LEN}, {MAX_PAYLOAD_LEN}]")]
    PayloadSize { len: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("end marker mismatch in message {msg_id} segment {seg_index}")]
    EndMarker { msg_id: u32, seg_index: u16 },
    #[error("data is not upper-case hex")]
    InvalidHex,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReassemblyError {
    #[error("no frames to reassemble")]
    Empty,
    #[error("frames belong to more than one message")]
    MixedMessages,
    #[error("message {msg_id} is incomplete, missing segments {missing:?}")]
    Incomplete { msg_id: u32, missing: Vec<u16> },
    #[error("segment {seg_index} received twice with different content")]
    ConflictingDuplicate { seg_index: u16 },
    #[error("declared length {declared} does not match received length {actual}")]
    LengthMismatch { declared: u32, actual: usize },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Six-byte device address carried in the DST field.
///
/// Mesh addresses are 16 bits wide; they occupy the two low-order bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeviceAddress(pub [u8; DST_LEN]);

impl DeviceAddress {
    pub fn from_mesh(addr: u16) -> Self {
        let [hi, lo] = addr.to_be_bytes();
        DeviceAddress([0, 0, 0, 0, hi, lo])
    }

    pub fn mesh(&self) -> u16 {
        u16::from_be_bytes([self.0[4], self.0[5]])
    }
}

impl fmt::Display for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

/// A validated message body, between 1 and 2000 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessagePayload(Vec<u8>);

impl MessagePayload {
    pub fn new(bytes: Vec<u8>) -> Result<Self, FrameError> {
        if (MIN_PAYLOAD_LEN..=MAX_PAYLOAD_LEN).contains(&bytes.len()) {
            Ok(MessagePayload(bytes))
        } else {
            Err(FrameError::PayloadSize { len: bytes.len() })
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub version: u8,
    pub msg_id: u32,
    pub seg_index: u16,
    pub seg_count: u16,
    pub data_len: u16,
    pub flags: u8,
}

impl MessageHeader {
    pub fn is_final(&self) -> bool {
        self.flags & FLAG_FINAL != 0
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.version != FRAME_VERSION {
            return Err(FrameError::InvalidHeader("unknown version"));
        }
        if self.seg_count == 0 || self.seg_index >= self.seg_count {
            return Err(FrameError::InvalidHeader("segment index out of range"));
        }
        if self.data_len == 0 || self.data_len as usize > MAX_DATA_LEN {
            return Err(FrameError::InvalidHeader("data length out of range"));
        }
        if self.flags & !FLAG_FINAL != 0 {
            return Err(FrameError::InvalidHeader("unknown flag bits"));
        }
        if self.is_final() != (self.seg_index + 1 == self.seg_count) {
            return Err(FrameError::InvalidHeader("final flag disagrees with segment index"));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = self.version;
        out[1..5].copy_from_slice(&self.msg_id.to_be_bytes());
        out[5..7].copy_from_slice(&self.seg_index.to_be_bytes());
        out[7..9].copy_from_slice(&self.seg_count.to_be_bytes());
        out[9..11].copy_from_slice(&self.data_len.to_be_bytes());
        out[11] = self.flags;
        // out[12] reserved, zero
        out
    }

    pub fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self, FrameError> {
        if bytes[12] != 0 {
            return Err(FrameError::InvalidHeader("reserved byte is not zero"));
        }
        let header = MessageHeader {
            version: bytes[0],
            msg_id: u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]),
            seg_index: u16::from_be_bytes([bytes[5], bytes[6]]),
            seg_count: u16::from_be_bytes([bytes[7], bytes[8]]),
            data_len: u16::from_be_bytes([bytes[9], bytes[10]]),
            flags: bytes[11],
        };
        header.validate()?;
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentFrame {
    pub header: MessageHeader,
    pub dst: DeviceAddress,
    /// Upper-case hex characters.
    pub data: Vec<u8>,
    /// Total hex length of the message; only on the final segment.
    pub total_len: Option<u32>,
}

impl SegmentFrame {
    pub fn encoded_len(&self) -> usize {
        PREFIX_LEN + self.data.len() + if self.header.is_final() { TRAILER_LEN } else { 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.dst.0);
        out.extend_from_slice(&START_MARKER);
        out.extend_from_slice(&self.data);
        if self.header.is_final() {
            out.extend_from_slice(&self.total_len.unwrap_or_default().to_be_bytes());
            out.extend_from_slice(&END_MARKER);
        }
        out
    }
}

fn is_hex_upper(b: u8) -> bool {
    b.is_ascii_digit() || (b'A'..=b'F').contains(&b)
}

/// Upper-case hex encoding of `payload`.
pub fn hex_encode(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.is_empty() {
        return Err(FrameError::EmptyPayload);
    }
    Ok(hex::encode_upper(payload).into_bytes())
}

pub fn hex_decode(data: &[u8]) -> Result<Vec<u8>, FrameError> {
    if !data.iter().all(|&b| is_hex_upper(b)) {
        return Err(FrameError::InvalidHex);
    }
    hex::decode(data).map_err(|_| FrameError::InvalidHex)
}

/// Number of frames needed for a payload of `payload_len` bytes.
pub fn frame_count(payload_len: usize) -> usize {
    (2 * payload_len).div_ceil(MAX_DATA_LEN)
}

/// Splits `payload` into frames addressed to `dst`.
pub fn encode_message(payload: &[u8], dst: DeviceAddress, msg_id: u32) -> Result<Vec<SegmentFrame>, FrameError> {
    if payload.is_empty() || payload.len() > MAX_PAYLOAD_LEN {
        return Err(FrameError::PayloadSize { len: payload.len() });
    }
    let hex = hex_encode(payload)?;
    let seg_count = hex.len().div_ceil(MAX_DATA_LEN) as u16;
    let frames = hex
        .chunks(MAX_DATA_LEN)
        .enumerate()
        .map(|(i, chunk)| {
            let seg_index = i as u16;
            let is_final = seg_index + 1 == seg_count;
            SegmentFrame {
                header: MessageHeader {
                    version: FRAME_VERSION,
                    msg_id,
                    seg_index,
                    seg_count,
                    data_len: chunk.len() as u16,
                    flags: if is_final { FLAG_FINAL } else { 0 },
                },
                dst,
                data: chunk.to_vec(),
                total_len: is_final.then_some(hex.len() as u32),
            }
        })
        .collect();
    Ok(frames)
}

/// [`encode_message`] followed by serialization of every frame.
pub fn encode_message_bytes(payload: &[u8], dst: DeviceAddress, msg_id: u32) -> Result<Vec<Vec<u8>>, FrameError> {
    Ok(encode_message(payload, dst, msg_id)?.iter().map(SegmentFrame::to_bytes).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseEvent {
    Frame(SegmentFrame),
    /// Bytes discarded while searching for the next frame boundary.
    Skipped(usize),
    /// A structurally valid frame whose trailer was corrupt.
    Error(FrameError),
}

/// Incremental frame parser; feed it bytes in any chunking.
#[derive(Debug, Default)]
pub struct StreamParser {
    buf: Vec<u8>,
    skipped: usize,
}

enum Attempt {
    NeedMore,
    Invalid,
    BadTrailer(FrameError),
    Frame(SegmentFrame, usize),
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held while waiting for the rest of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<ParseEvent> {
        self.buf.extend_from_slice(bytes);
        let mut events = Vec::new();
        let mut pos = 0;
        loop {
            match Self::attempt(&self.buf[pos..]) {
                Attempt::NeedMore => break,
                Attempt::Invalid => {
                    pos += 1;
                    self.skipped += 1;
                }
                Attempt::BadTrailer(err) => {
                    self.flush_skipped(&mut events);
                    events.push(ParseEvent::Error(err));
                    // the bytes may still hide the start of a valid frame
                    pos += 1;
                }
                Attempt::Frame(frame, used) => {
                    self.flush_skipped(&mut events);
                    events.push(ParseEvent::Frame(frame));
                    pos += used;
                }
            }
        }
        self.buf.drain(..pos);
        events
    }

    fn flush_skipped(&mut self, events: &mut Vec<ParseEvent>) {
        if self.skipped > 0 {
            events.push(ParseEvent::Skipped(self.skipped));
            self.skipped = 0;
        }
    }

    fn attempt(buf: &[u8]) -> Attempt {
        if buf.len() < PREFIX_LEN {
            return Attempt::NeedMore;
        }
        let header_bytes: &[u8; HEADER_LEN] = buf[..HEADER_LEN].try_into().unwrap();
        let Ok(header) = MessageHeader::decode(header_bytes) else {
            return Attempt::Invalid;
        };
        if buf[HEADER_LEN + DST_LEN..PREFIX_LEN] != START_MARKER {
            return Attempt::Invalid;
        }
        let data_end = PREFIX_LEN + header.data_len as usize;
        let frame_end = data_end + if header.is_final() { TRAILER_LEN } else { 0 };
        if buf.len() < data_end {
            // an invalid byte already visible means this is not a frame
            if !buf[PREFIX_LEN..].iter().all(|&b| is_hex_upper(b)) {
                return Attempt::Invalid;
            }
            return Attempt::NeedMore;
        }
        if !buf[PREFIX_LEN..data_end].iter().all(|&b| is_hex_upper(b)) {
            return Attempt::Invalid;
        }
        if buf.len() < frame_end {
            return Attempt::NeedMore;
        }
        let mut dst = [0u8; DST_LEN];
        dst.copy_from_slice(&buf[HEADER_LEN..HEADER_LEN + DST_LEN]);
        let total_len = if header.is_final() {
            if buf[data_end + LENGTH_LEN..frame_end] != END_MARKER {
                return Attempt::BadTrailer(FrameError::EndMarker {
                    msg_id: header.msg_id,
                    seg_index: header.seg_index,
                });
            }
            let len: [u8; 4] = buf[data_end..data_end + LENGTH_LEN].try_into().unwrap();
            Some(u32::from_be_bytes(len))
        } else {
            None
        };
        Attempt::Frame(
            SegmentFrame { header, dst: DeviceAddress(dst), data: buf[PREFIX_LEN..data_end].to_vec(), total_len },
            frame_end,
        )
    }
}

/// Convenience wrapper: parse a complete byte buffer.
pub fn parse_stream(bytes: &[u8]) -> Vec<ParseEvent> {
    StreamParser::new().push(bytes)
}

/// Rebuilds the payload of one message from its frames.
///
/// Frames may be given in any order. Only the length is checked; integrity
/// of the content is left to the layer above.
pub fn reassemble<'a, I>(frames: I) -> Result<MessagePayload, ReassemblyError>
where
    I: IntoIterator<Item = &'a SegmentFrame>,
{
    let mut iter = frames.into_iter();
    let first = iter.next().ok_or(ReassemblyError::Empty)?;
    let msg_id = first.header.msg_id;
    let seg_count = first.header.seg_count;
    let mut slots: Vec<Option<&SegmentFrame>> = vec![None; seg_count as usize];
    for frame in std::iter::once(first).chain(iter) {
        if frame.header.msg_id != msg_id || frame.header.seg_count != seg_count {
            return Err(ReassemblyError::MixedMessages);
        }
        let slot = &mut slots[frame.header.seg_index as usize];
        match slot {
            Some(prev) if prev.data != frame.data || prev.total_len != frame.total_len => {
                return Err(ReassemblyError::ConflictingDuplicate { seg_index: frame.header.seg_index });
            }
            _ => *slot = Some(frame),
        }
    }
    let missing: Vec<u16> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i as u16).collect();
    if !missing.is_empty() {
        return Err(ReassemblyError::Incomplete { msg_id, missing });
    }
    let mut hex = Vec::new();
    for frame in slots.iter().flatten() {
        hex.extend_from_slice(&frame.data);
    }
    let declared = slots.last().and_then(|f| f.and_then(|f| f.total_len)).unwrap_or_default();
    if declared as usize != hex.len() {
        return Err(ReassemblyError::LengthMismatch { declared, actual: hex.len() });
    }
    let bytes = hex_decode(&hex)?;
    Ok(MessagePayload::new(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames_of(events: Vec<ParseEvent>) -> Vec<SegmentFrame> {
        events
            .into_iter()
            .filter_map(|e| match e {
                ParseEvent::Frame(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn hex_encode_examples() {
        assert_eq!(hex_encode(b"hi").unwrap(), b"6869");
        assert_eq!(hex_encode(&[]), Err(FrameError::EmptyPayload));
        assert_eq!(hex_encode(&[0xAB; 2000]).unwrap().len(), 4000);
        assert_eq!(hex_encode(&[0xab, 0x0f]).unwrap(), b"AB0F");
    }

    #[test]
    fn single_frame_message() {
        let frames = encode_message_bytes(b"hi", DeviceAddress::from_mesh(0x23), 1).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].len(), 32);
    }

    #[test]
    fn max_payload_splits_into_eighteen() {
        let frames = encode_message(&[7u8; 2000], DeviceAddress::default(), 9).unwrap();
        assert_eq!(frames.len(), 18);
        assert_eq!(frame_count(2000), 18);
        assert!(frames.iter().all(|f| f.encoded_len() <= MAX_FRAME_LEN));
        assert_eq!(frames.last().unwrap().total_len, Some(4000));
    }

    #[test]
    fn full_final_frame_is_255_bytes() {
        // 227 hex chars would need an odd payload; 113.5 bytes is impossible,
        // so build the frame directly
        let frame = SegmentFrame {
            header: MessageHeader {
                version: FRAME_VERSION,
                msg_id: 1,
                seg_index: 0,
                seg_count: 1,
                data_len: 227,
                flags: FLAG_FINAL,
            },
            dst: DeviceAddress::default(),
            data: vec![b'A'; 227],
            total_len: Some(227),
        };
        assert_eq!(frame.to_bytes().len(), 255);
        let parsed = frames_of(parse_stream(&frame.to_bytes()));
        assert_eq!(parsed, vec![frame]);
    }

    #[test]
    fn oversize_and_empty_payloads_rejected() {
        assert_eq!(encode_message(&[0; 2001], DeviceAddress::default(), 0), Err(FrameError::PayloadSize { len: 2001 }));
        assert!(encode_message(&[], DeviceAddress::default(), 0).is_err());
    }

    #[test]
    fn header_invariants() {
        let good = MessageHeader { version: 1, msg_id: 5, seg_index: 1, seg_count: 2, data_len: 10, flags: FLAG_FINAL };
        assert!(good.validate().is_ok());
        assert_eq!(MessageHeader::decode(&good.encode()).unwrap(), good);
        let not_final = MessageHeader { flags: 0, ..good };
        assert!(not_final.validate().is_err());
        let bad_index = MessageHeader { seg_index: 2, ..good };
        assert!(bad_index.validate().is_err());
        let too_long = MessageHeader { data_len: 228, ..good };
        assert!(too_long.validate().is_err());
        let mut raw = good.encode();
        raw[12] = 1;
        assert!(MessageHeader::decode(&raw).is_err());
    }

    #[test]
    fn byte_by_byte_replay() {
        let bytes: Vec<u8> = encode_message_bytes(&[0x5a; 700], DeviceAddress::from_mesh(2), 3).unwrap().concat();
        let mut parser = StreamParser::new();
        let mut out = Vec::new();
        for b in &bytes {
            out.extend(parser.push(std::slice::from_ref(b)));
        }
        let frames = frames_of(out);
        assert_eq!(frames, encode_message(&[0x5a; 700], DeviceAddress::from_mesh(2), 3).unwrap());
        assert_eq!(reassemble(&frames).unwrap().as_bytes(), &[0x5a; 700][..]);
    }

    #[test]
    fn back_to_back_messages() {
        let a = encode_message_bytes(b"first message", DeviceAddress::from_mesh(1), 1).unwrap();
        let b = encode_message_bytes(&[1u8; 300], DeviceAddress::from_mesh(1), 2).unwrap();
        let stream = [a.concat(), b.concat()].concat();
        let frames = frames_of(parse_stream(&stream));
        assert_eq!(frames.len(), a.len() + b.len());
        let (fa, fb): (Vec<_>, Vec<_>) = frames.into_iter().partition(|f| f.header.msg_id == 1);
        assert_eq!(reassemble(&fa).unwrap().as_bytes(), b"first message");
        assert_eq!(reassemble(&fb).unwrap().as_bytes(), &[1u8; 300][..]);
    }

    #[test]
    fn leading_garbage_is_skipped() {
        let mut stream = vec![0x00, 0xFF, 0x3C];
        stream.extend(encode_message_bytes(b"hi", DeviceAddress::default(), 4).unwrap().concat());
        let events = parse_stream(&stream);
        assert_eq!(events[0], ParseEvent::Skipped(3));
        let frames = frames_of(events);
        assert_eq!(reassemble(&frames).unwrap().as_bytes(), b"hi");
    }

    #[test]
    fn corrupt_end_marker_reports_error() {
        let mut bytes = encode_message_bytes(b"hi", DeviceAddress::default(), 4).unwrap().concat();
        let n = bytes.len();
        bytes[n - 1] = b'!';
        let events = parse_stream(&bytes);
        assert!(events.iter().any(|e| matches!(e, ParseEvent::Error(FrameError::EndMarker { msg_id: 4, .. }))));
        assert!(frames_of(events).is_empty());
    }

    #[test]
    fn withheld_segment_is_incomplete() {
        let mut frames = encode_message(&[3u8; 2000], DeviceAddress::default(), 11).unwrap();
        frames.remove(7);
        match reassemble(&frames) {
            Err(ReassemblyError::Incomplete { missing, .. }) => assert_eq!(missing, vec![7]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_total_len_is_length_mismatch() {
        let mut frames = encode_message(&[3u8; 2000], DeviceAddress::default(), 11).unwrap();
        let last = frames.last_mut().unwrap();
        last.total_len = last.total_len.map(|l| l + 2);
        assert_eq!(reassemble(&frames), Err(ReassemblyError::LengthMismatch { declared: 4002, actual: 4000 }));
    }

    #[test]
    fn conflicting_duplicate_segment() {
        let mut frames = encode_message(&[3u8; 300], DeviceAddress::default(), 1).unwrap();
        let mut dup = frames[0].clone();
        dup.data[0] = b'F';
        frames.push(dup);
        assert!(matches!(reassemble(&frames), Err(ReassemblyError::ConflictingDuplicate { seg_index: 0 })));
        // identical duplicate is tolerated
        let mut frames = encode_message(&[3u8; 300], DeviceAddress::default(), 1).unwrap();
        frames.push(frames[1].clone());
        assert!(reassemble(&frames).is_ok());
    }

    #[test]
    fn mesh_address_in_low_bytes() {
        let addr = DeviceAddress::from_mesh(0xC000);
        assert_eq!(addr.0, [0, 0, 0, 0, 0xC0, 0x00]);
        assert_eq!(addr.mesh(), 0xC000);
        assert_eq!(addr.to_string(), "00:00:00:00:c0:00");
    }
}
