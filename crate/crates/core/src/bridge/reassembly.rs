use std::collections::BTreeMap;
use std::time::Duration;

use crate::frame_codec::{reassemble, DeviceAddress, MessagePayload, ParseEvent, SegmentFrame, StreamParser};
use crate::sim::SimTime;

use super::BridgeError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InboundEvent {
    Delivered { source: DeviceAddress, msg_id: u32, payload: MessagePayload },
    Error(BridgeError),
}

#[derive(Debug)]
struct Partial {
    frames: BTreeMap<u16, SegmentFrame>,
    started_at: SimTime,
    /// Set once the message is known to be unusable; later frames are
    /// swallowed until the entry times out.
    discarded: bool,
}

/// Frames collected per `(source, msg_id)` until their message completes.
#[derive(Debug)]
pub struct ReassemblyBuffer {
    partial: BTreeMap<(DeviceAddress, u32), Partial>,
    timeout: Duration,
}

impl ReassemblyBuffer {
    pub fn new(timeout: Duration) -> Self {
        ReassemblyBuffer { partial: BTreeMap::new(), timeout }
    }

    pub fn len(&self) -> usize {
        self.partial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partial.is_empty()
    }

    pub fn clear(&mut self) {
        self.partial.clear();
    }

    /// Adds one frame. `source` is the remote device; on the inbound path
    /// the radio reports it in the frame's address field.
    pub fn insert(&mut self, frame: SegmentFrame, now: SimTime) -> Option<InboundEvent> {
        let source = frame.dst;
        let msg_id = frame.header.msg_id;
        let key = (source, msg_id);
        let entry = self.partial.entry(key).or_insert_with(|| Partial {
            frames: BTreeMap::new(),
            started_at: now,
            discarded: false,
        });
        if entry.discarded {
            return None;
        }
        let seg_index = frame.header.seg_index;
        if let Some(prev) = entry.frames.get(&seg_index) {
            if prev.data != frame.data || prev.total_len != frame.total_len {
                entry.discarded = true;
                entry.frames.clear();
                return Some(InboundEvent::Error(BridgeError::ConflictingDuplicate {
                    origin: source,
                    msg_id,
                    seg_index,
                }));
            }
        }
        let is_final = frame.header.is_final();
        entry.frames.insert(seg_index, frame);
        if !is_final {
            return None;
        }
        let entry = self.partial.remove(&key).expect("present");
        Some(match reassemble(entry.frames.values()) {
            Ok(payload) => InboundEvent::Delivered { source, msg_id, payload },
            Err(error) => InboundEvent::Error(BridgeError::Reassembly { origin: source, msg_id, error }),
        })
    }

    /// Evicts entries older than the timeout.
    pub fn expire(&mut self, now: SimTime) -> Vec<InboundEvent> {
        let timeout = self.timeout;
        let stale: Vec<_> = self
            .partial
            .iter()
            .filter(|(_, p)| p.started_at + timeout <= now)
            .map(|(k, p)| (*k, p.discarded))
            .collect();
        let mut events = Vec::new();
        for ((source, msg_id), discarded) in stale {
            self.partial.remove(&(source, msg_id));
            if !discarded {
                events.push(InboundEvent::Error(BridgeError::TimedOut { origin: source, msg_id }));
            }
        }
        events
    }

    pub fn next_expiry(&self) -> Option<SimTime> {
        self.partial.values().map(|p| p.started_at + self.timeout).min()
    }
}

/// Receive half of a bridge: stream parser feeding a reassembly buffer.
#[derive(Debug)]
pub struct Inbound {
    parser: StreamParser,
    buffer: ReassemblyBuffer,
}

impl Inbound {
    pub fn new(timeout: Duration) -> Self {
        Inbound { parser: StreamParser::new(), buffer: ReassemblyBuffer::new(timeout) }
    }

    pub fn on_bytes(&mut self, bytes: &[u8], now: SimTime) -> Vec<InboundEvent> {
        let mut events = self.buffer.expire(now);
        for parsed in self.parser.push(bytes) {
            match parsed {
                ParseEvent::Frame(frame) => events.extend(self.buffer.insert(frame, now)),
                ParseEvent::Skipped(n) => events.push(InboundEvent::Error(BridgeError::Resync { skipped: n })),
                ParseEvent::Error(e) => events.push(InboundEvent::Error(BridgeError::Frame(e))),
            }
        }
        events
    }

    pub fn expire(&mut self, now: SimTime) -> Vec<InboundEvent> {
        self.buffer.expire(now)
    }

    pub fn next_expiry(&self) -> Option<SimTime> {
        self.buffer.next_expiry()
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Drops all partial state, as after a restart.
    pub fn reset(&mut self) {
        self.parser = StreamParser::new();
        self.buffer.clear();
    }
}
