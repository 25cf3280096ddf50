//! multistream-select: length-prefixed, newline-terminated protocol ids and
//! the dialer/listener state machines that agree on one.

use std::collections::VecDeque;

use thiserror::Error;
use unsigned_varint::{decode, encode};

pub const MULTISTREAM_ID: &str = "/multistream/1.0.0";
pub const NOISE_ID: &str = "/noise";
pub const TLS_ID: &str = "/tls/1.0.0";
pub const YAMUX_ID: &str = "/yamux/1.0.0";
pub const FLOODSUB_ID: &str = "/floodsub/1.0.0";
pub const NA: &str = "na";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NegotiationError {
    #[error("protocol id is empty")]
    EmptyId,
    #[error("protocol id contains a newline")]
    EmbeddedNewline,
    #[error("malformed multistream message: {0}")]
    Malformed(&'static str),
    #[error("expected the multistream header, got {0:?}")]
    HeaderMismatch(String),
    #[error("no common protocol")]
    NoCommonProtocol,
    #[error("unexpected message {0:?}")]
    Unexpected(String),
}

/// Varint of the body length (id plus newline), the id, then `\n`.
pub fn multistream_encode(id: &str) -> Result<Vec<u8>, NegotiationError> {
    if id.is_empty() {
        return Err(NegotiationError::EmptyId);
    }
    if id.contains('\n') {
        return Err(NegotiationError::EmbeddedNewline);
    }
    let mut lenbuf = encode::u64_buffer();
    let prefix = encode::u64(id.len() as u64 + 1, &mut lenbuf);
    let mut out = Vec::with_capacity(prefix.len() + id.len() + 1);
    out.extend_from_slice(prefix);
    out.extend_from_slice(id.as_bytes());
    out.push(b'\n');
    Ok(out)
}

/// Decodes one message from the front of `buf`. `Ok(None)` means more bytes
/// are needed; otherwise returns the id and the bytes consumed.
pub fn multistream_decode(buf: &[u8]) -> Result<Option<(String, usize)>, NegotiationError> {
    let (len, rest) = match decode::u64(buf) {
        Ok(v) => v,
        Err(decode::Error::Insufficient) => return Ok(None),
        Err(_) => return Err(NegotiationError::Malformed("bad length prefix")),
    };
    if len < 2 {
        return Err(NegotiationError::Malformed("body too short"));
    }
    let len = usize::try_from(len).map_err(|_| NegotiationError::Malformed("length overflow"))?;
    if rest.len() < len {
        return Ok(None);
    }
    let body = &rest[..len];
    if body[len - 1] != b'\n' {
        return Err(NegotiationError::Malformed("missing newline"));
    }
    let id = std::str::from_utf8(&body[..len - 1]).map_err(|_| NegotiationError::Malformed("not utf-8"))?;
    if id.contains('\n') {
        return Err(NegotiationError::Malformed("embedded newline"));
    }
    Ok(Some((id.to_string(), buf.len() - rest.len() + len)))
}

/// Decodes a buffer that must hold whole messages only.
pub fn multistream_decode_all(mut buf: &[u8]) -> Result<Vec<String>, NegotiationError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (id, used) = multistream_decode(buf)?.ok_or(NegotiationError::Malformed("truncated message"))?;
        out.push(id);
        buf = &buf[used..];
    }
    Ok(out)
}

/// What a negotiator wants done after consuming a message.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Step {
    pub send: Option<Vec<u8>>,
    pub agreed: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DialerState {
    AwaitHeader,
    AwaitAnswer,
    Done,
}

/// The proposing side. Proposes ids in order once the listener's header
/// has arrived.
#[derive(Debug, Clone)]
pub struct Dialer {
    proposals: Vec<String>,
    next: usize,
    state: DialerState,
}

impl Dialer {
    /// Returns the dialer and the header it sends immediately.
    pub fn new<S: Into<String>>(proposals: impl IntoIterator<Item = S>) -> (Self, Vec<u8>) {
        let dialer = Dialer {
            proposals: proposals.into_iter().map(Into::into).collect(),
            next: 0,
            state: DialerState::AwaitHeader,
        };
        (dialer, multistream_encode(MULTISTREAM_ID).expect("valid id"))
    }

    pub fn is_done(&self) -> bool {
        self.state == DialerState::Done
    }

    pub fn on_message(&mut self, msg: &str) -> Result<Step, NegotiationError> {
        match self.state {
            DialerState::AwaitHeader => {
                if msg != MULTISTREAM_ID {
                    self.state = DialerState::Done;
                    return Err(NegotiationError::HeaderMismatch(msg.to_string()));
                }
                self.propose()
            }
            DialerState::AwaitAnswer => {
                let current = &self.proposals[self.next];
                if msg == current {
                    self.state = DialerState::Done;
                    Ok(Step { send: None, agreed: Some(current.clone()) })
                } else if msg == NA {
                    self.next += 1;
                    self.propose()
                } else {
                    self.state = DialerState::Done;
                    Err(NegotiationError::Unexpected(msg.to_string()))
                }
            }
            DialerState::Done => Err(NegotiationError::Unexpected(msg.to_string())),
        }
    }

    fn propose(&mut self) -> Result<Step, NegotiationError> {
        match self.proposals.get(self.next) {
            Some(id) => {
                self.state = DialerState::AwaitAnswer;
                Ok(Step { send: Some(multistream_encode(id)?), agreed: None })
            }
            None => {
                self.state = DialerState::Done;
                Err(NegotiationError::NoCommonProtocol)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ListenerState {
    AwaitHeader,
    AwaitProposal,
    Done,
}

/// The answering side: echoes the first supported proposal, "na" otherwise.
#[derive(Debug, Clone)]
pub struct Listener {
    supported: Vec<String>,
    state: ListenerState,
}

impl Listener {
    /// Returns the listener and the header it sends immediately.
    pub fn new<S: Into<String>>(supported: impl IntoIterator<Item = S>) -> (Self, Vec<u8>) {
        let listener =
            Listener { supported: supported.into_iter().map(Into::into).collect(), state: ListenerState::AwaitHeader };
        (listener, multistream_encode(MULTISTREAM_ID).expect("valid id"))
    }

    pub fn is_done(&self) -> bool {
        self.state == ListenerState::Done
    }

    pub fn on_message(&mut self, msg: &str) -> Result<Step, NegotiationError> {
        match self.state {
            ListenerState::AwaitHeader => {
                if msg != MULTISTREAM_ID {
                    self.state = ListenerState::Done;
                    return Err(NegotiationError::HeaderMismatch(msg.to_string()));
                }
                self.state = ListenerState::AwaitProposal;
                Ok(Step::default())
            }
            ListenerState::AwaitProposal => {
                if self.supported.iter().any(|s| s == msg) {
                    self.state = ListenerState::Done;
                    Ok(Step { send: Some(multistream_encode(msg)?), agreed: Some(msg.to_string()) })
                } else {
                    Ok(Step { send: Some(multistream_encode(NA)?), agreed: None })
                }
            }
            ListenerState::Done => Err(NegotiationError::Unexpected(msg.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub from: Side,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negotiation {
    pub outcome: Result<String, NegotiationError>,
    pub transcript: Vec<TranscriptEntry>,
}

/// Runs a dialer and a listener against each other in memory and records
/// every message either side put on the wire.
pub fn negotiate(proposals: &[&str], supported: &[&str]) -> Negotiation {
    let (mut dialer, d_header) = Dialer::new(proposals.iter().copied());
    let (mut listener, l_header) = Listener::new(supported.iter().copied());
    let mut transcript = vec![
        TranscriptEntry { from: Side::Initiator, bytes: d_header.clone() },
        TranscriptEntry { from: Side::Responder, bytes: l_header.clone() },
    ];
    let mut to_listener = VecDeque::from([d_header]);
    let mut to_dialer = VecDeque::from([l_header]);
    let fail = |e, transcript| Negotiation { outcome: Err(e), transcript };
    loop {
        while let Some(bytes) = to_listener.pop_front() {
            let step = multistream_decode_all(&bytes)
                .and_then(|ids| ids.iter().try_fold(Step::default(), |_, id| listener.on_message(id)));
            match step {
                Ok(Step { send: Some(b), .. }) => {
                    transcript.push(TranscriptEntry { from: Side::Responder, bytes: b.clone() });
                    to_dialer.push_back(b);
                }
                Ok(_) => {}
                Err(e) => return fail(e, transcript),
            }
        }
        let Some(bytes) = to_dialer.pop_front() else {
            return fail(NegotiationError::Malformed("negotiation stalled"), transcript);
        };
        let step = multistream_decode_all(&bytes)
            .and_then(|ids| ids.iter().try_fold(Step::default(), |_, id| dialer.on_message(id)));
        match step {
            Ok(Step { agreed: Some(p), .. }) => return Negotiation { outcome: Ok(p), transcript },
            Ok(Step { send: Some(b), .. }) => {
                transcript.push(TranscriptEntry { from: Side::Initiator, bytes: b.clone() });
                to_listener.push_back(b);
            }
            Ok(_) => {}
            Err(e) => return fail(e, transcript),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let hdr = multistream_encode(MULTISTREAM_ID).unwrap();
        assert_eq!(hdr[0], 0x13);
        assert_eq!(&hdr[1..19], MULTISTREAM_ID.as_bytes());
        assert_eq!(hdr[19], 0x0A);
        assert_eq!(hdr.len(), 20);
        assert_eq!(multistream_encode("na").unwrap(), vec![0x03, 0x6E, 0x61, 0x0A]);
        assert_eq!(multistream_encode(""), Err(NegotiationError::EmptyId));
        assert_eq!(multistream_encode("a\nb"), Err(NegotiationError::EmbeddedNewline));
    }

    #[test]
    fn long_ids_use_multibyte_prefix() {
        let id = "x".repeat(200);
        let enc = multistream_encode(&id).unwrap();
        assert_eq!(&enc[..2], &[0xC9, 0x01]);
        assert_eq!(multistream_decode(&enc).unwrap(), Some((id, enc.len())));
    }

    #[test]
    fn decode_needs_more_and_rejects_garbage() {
        let enc = multistream_encode(NOISE_ID).unwrap();
        assert_eq!(multistream_decode(&enc[..3]).unwrap(), None);
        assert_eq!(multistream_decode(&[]).unwrap(), None);
        let mut bad = enc.clone();
        *bad.last_mut().unwrap() = b'!';
        assert!(multistream_decode(&bad).is_err());
        assert!(multistream_decode(&[0x01, b'\n']).is_err());
    }

    #[test]
    fn tls_rejected_then_noise() {
        let n = negotiate(&[TLS_ID, NOISE_ID], &[NOISE_ID]);
        assert_eq!(n.outcome, Ok(NOISE_ID.to_string()));
        let msgs: Vec<(Side, String)> =
            n.transcript.iter().map(|e| (e.from, multistream_decode_all(&e.bytes).unwrap().join("|"))).collect();
        let want = [
            (Side::Initiator, MULTISTREAM_ID),
            (Side::Responder, MULTISTREAM_ID),
            (Side::Initiator, TLS_ID),
            (Side::Responder, NA),
            (Side::Initiator, NOISE_ID),
            (Side::Responder, NOISE_ID),
        ];
        assert_eq!(msgs, want.map(|(s, m)| (s, m.to_string())));
    }

    #[test]
    fn immediate_agreement() {
        let n = negotiate(&[NOISE_ID], &[NOISE_ID]);
        assert_eq!(n.outcome, Ok(NOISE_ID.to_string()));
        assert_eq!(n.transcript.len(), 4);
    }

    #[test]
    fn no_common_protocol() {
        let n = negotiate(&[TLS_ID], &[]);
        assert_eq!(n.outcome, Err(NegotiationError::NoCommonProtocol));
        assert_eq!(n.transcript.len(), 4);
    }

    #[test]
    fn header_mismatch_terminates() {
        let (mut l, _) = Listener::new([NOISE_ID]);
        assert!(matches!(l.on_message(NOISE_ID), Err(NegotiationError::HeaderMismatch(_))));
        let (mut d, _) = Dialer::new([NOISE_ID]);
        assert!(matches!(d.on_message("/multistream/2.0.0"), Err(NegotiationError::HeaderMismatch(_))));
        assert!(d.is_done());
    }
}
