//! FloodSub records. Each record is varint-length-prefixed on the stream:
//! kind byte, varint topic length + topic, and for MSG the source id
//! (varint length + utf8), seqno (u64 BE) and varint payload length +
//! payload.

use thiserror::Error;
use unsigned_varint::{decode, encode};

use crate::p2p::PeerId;

const KIND_SUB: u8 = 1;
const KIND_UNSUB: u8 = 2;
const KIND_MSG: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PubSubMessage {
    pub source: PeerId,
    pub seqno: u64,
    pub topic: String,
    pub payload: Vec<u8>,
}

impl PubSubMessage {
    pub fn key(&self) -> (PeerId, u64) {
        (self.source.clone(), self.seqno)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Subscribe(String),
    Unsubscribe(String),
    Message(PubSubMessage),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated pubsub record")]
    Truncated,
    #[error("bad varint in pubsub record")]
    BadVarint,
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("record field is not utf8")]
    NotUtf8,
    #[error("invalid source peer id")]
    BadSource,
    #[error("{0} trailing bytes in record")]
    Trailing(usize),
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    let mut buf = encode::usize_buffer();
    out.extend_from_slice(encode::usize(b.len(), &mut buf));
    out.extend_from_slice(b);
}

fn varint(buf: &[u8]) -> Result<(usize, &[u8]), WireError> {
    decode::usize(buf).map_err(|e| match e {
        decode::Error::Insufficient => WireError::Truncated,
        _ => WireError::BadVarint,
    })
}

fn take_bytes(buf: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    let (len, rest) = varint(buf)?;
    if rest.len() < len {
        return Err(WireError::Truncated);
    }
    Ok(rest.split_at(len))
}

fn take_str(buf: &[u8]) -> Result<(&str, &[u8]), WireError> {
    let (b, rest) = take_bytes(buf)?;
    Ok((std::str::from_utf8(b).map_err(|_| WireError::NotUtf8)?, rest))
}

impl Record {
    /// The record body, without the outer length prefix.
    pub fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Record::Subscribe(t) => {
                out.push(KIND_SUB);
                put_bytes(&mut out, t.as_bytes());
            }
            Record::Unsubscribe(t) => {
                out.push(KIND_UNSUB);
                put_bytes(&mut out, t.as_bytes());
            }
            Record::Message(m) => {
                out.push(KIND_MSG);
                put_bytes(&mut out, m.topic.as_bytes());
                put_bytes(&mut out, m.source.as_str().as_bytes());
                out.extend_from_slice(&m.seqno.to_be_bytes());
                put_bytes(&mut out, &m.payload);
            }
        }
        out
    }

    pub fn decode_body(body: &[u8]) -> Result<Record, WireError> {
        let (&kind, rest) = body.split_first().ok_or(WireError::Truncated)?;
        let (topic, rest) = take_str(rest)?;
        let topic = topic.to_string();
        let (rec, rest) = match kind {
            KIND_SUB => (Record::Subscribe(topic), rest),
            KIND_UNSUB => (Record::Unsubscribe(topic), rest),
            KIND_MSG => {
                let (source, rest) = take_str(rest)?;
                let source = PeerId::parse(source).ok_or(WireError::BadSource)?;
                if rest.len() < 8 {
                    return Err(WireError::Truncated);
                }
                let (seq, rest) = rest.split_at(8);
                let seqno = u64::from_be_bytes(seq.try_into().unwrap());
                let (payload, rest) = take_bytes(rest)?;
                (Record::Message(PubSubMessage { source, seqno, topic, payload: payload.to_vec() }), rest)
            }
            k => return Err(WireError::UnknownKind(k)),
        };
        if !rest.is_empty() {
            return Err(WireError::Trailing(rest.len()));
        }
        Ok(rec)
    }

    /// Length-prefixed form, as written to the stream.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut out = Vec::with_capacity(body.len() + 3);
        put_bytes(&mut out, &body);
        out
    }
}

/// Splits stream bytes into records. Bytes of an incomplete trailing
/// record are left in `buf`.
pub fn decode_records(buf: &mut Vec<u8>) -> Result<Vec<Record>, WireError> {
    let mut records = Vec::new();
    let mut used = 0;
    loop {
        let rest = &buf[used..];
        if rest.is_empty() {
            break;
        }
        let (body, after) = match take_bytes(rest) {
            Ok(v) => v,
            Err(WireError::Truncated) => break,
            Err(e) => return Err(e),
        };
        records.push(Record::decode_body(body)?);
        used = buf.len() - after.len();
    }
    buf.drain(..used);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::p2p::Keypair;
    use rand::SeedableRng;

    fn peer() -> PeerId {
        Keypair::generate(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).peer_id()
    }

    #[test]
    fn subscribe_layout() {
        let r = Record::Subscribe("t".into());
        assert_eq!(r.encode(), vec![3, 1, 1, b't']);
    }

    #[test]
    fn message_round_trip() {
        let m = PubSubMessage { source: peer(), seqno: 0x0102, topic: "sensors".into(), payload: vec![0, 255, 7] };
        let body = Record::Message(m.clone()).encode_body();
        assert_eq!(body[0], 3);
        assert_eq!(&body[1..9], b"\x07sensors");
        assert_eq!(&body[10..62], m.source.as_str().as_bytes());
        assert_eq!(&body[62..70], &[0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(Record::decode_body(&body).unwrap(), Record::Message(m));
    }

    #[test]
    fn stream_split_across_reads() {
        let recs = vec![
            Record::Subscribe("a".into()),
            Record::Message(PubSubMessage { source: peer(), seqno: 9, topic: "a".into(), payload: vec![1; 300] }),
            Record::Unsubscribe("a".into()),
        ];
        let wire: Vec<u8> = recs.iter().flat_map(|r| r.encode()).collect();
        let mut buf = Vec::new();
        let mut got = Vec::new();
        for chunk in wire.chunks(7) {
            buf.extend_from_slice(chunk);
            got.extend(decode_records(&mut buf).unwrap());
        }
        assert!(buf.is_empty());
        assert_eq!(got, recs);
    }

    #[test]
    fn malformed() {
        assert_eq!(Record::decode_body(&[9, 0]), Err(WireError::UnknownKind(9)));
        assert_eq!(Record::decode_body(&[1, 2, b'a']), Err(WireError::Truncated));
        assert_eq!(Record::decode_body(&[1, 1, b'a', 0]), Err(WireError::Trailing(1)));
        assert_eq!(Record::decode_body(&[3, 0, 1, b'x']), Err(WireError::BadSource));
        assert_eq!(Record::decode_body(&[1, 1, 0xFF]), Err(WireError::NotUtf8));
    }
}
