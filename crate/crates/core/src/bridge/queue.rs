use std::collections::VecDeque;
use std::time::Duration;

use crate::frame_codec::SegmentFrame;
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedFrame {
    pub bytes: Vec<u8>,
    pub msg_id: u32,
    pub seg_index: u16,
    pub is_final: bool,
    pub tag: Option<u64>,
    pub enqueued_at: SimTime,
}

/// Outbound frames waiting for the serial port.
///
/// Consecutive writes are at least `delay` apart, across message
/// boundaries too, and frames leave in the order they were queued.
#[derive(Debug, Clone)]
pub struct SegmentQueue {
    pending: VecDeque<QueuedFrame>,
    delay: Duration,
    last_write: Option<SimTime>,
}

impl SegmentQueue {
    pub fn new(delay: Duration) -> Self {
        SegmentQueue { pending: VecDeque::new(), delay, last_write: None }
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }

    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = delay;
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }

    pub fn enqueue(&mut self, frames: &[SegmentFrame], tag: Option<u64>, now: SimTime) {
        self.pending.extend(frames.iter().map(|f| QueuedFrame {
            bytes: f.to_bytes(),
            msg_id: f.header.msg_id,
            seg_index: f.header.seg_index,
            is_final: f.header.is_final(),
            tag,
            enqueued_at: now,
        }));
    }

    /// Earliest time the head of the queue may be written.
    pub fn next_write_at(&self) -> Option<SimTime> {
        let head = self.pending.front()?;
        Some(match self.last_write {
            Some(last) => head.enqueued_at.max(last + self.delay),
            None => head.enqueued_at,
        })
    }

    /// Takes the head of the queue if it is due at `now`.
    pub fn pop_due(&mut self, now: SimTime) -> Option<QueuedFrame> {
        if self.next_write_at()? > now {
            return None;
        }
        self.last_write = Some(now);
        self.pending.pop_front()
    }
}
