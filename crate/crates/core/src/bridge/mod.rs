//! The Bridge between the host and the mesh radio's serial port: outbound
//! frames are written with a fixed gap between them, inbound bytes are
//! parsed and reassembled per `(source, msg_id)`.
//!
//! [`SegmentQueue`] and [`Inbound`] are clock-free and drive the simulator;
//! [`Bridge`] and [`spawn_reader`] run them against a real byte port.

mod port;
mod queue;
mod reassembly;

use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::frame_codec::{encode_message_bytes, DeviceAddress, FrameError, MessagePayload, ReassemblyError};
use crate::sim::SimTime;

pub use port::{open_serial, pipe, PipeEnd};
pub use queue::{QueuedFrame, SegmentQueue};
pub use reassembly::{Inbound, InboundEvent, ReassemblyBuffer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BridgeError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("skipped {skipped} unparseable bytes")]
    Resync { skipped: usize },
    #[error("message {msg_id} from {origin} discarded: {error}")]
    Reassembly { origin: DeviceAddress, msg_id: u32, error: ReassemblyError },
    #[error("message {msg_id} from {origin} discarded: segment {seg_index} arrived twice with different content")]
    ConflictingDuplicate { origin: DeviceAddress, msg_id: u32, seg_index: u16 },
    #[error("message {msg_id} from {origin} timed out before completing")]
    TimedOut { origin: DeviceAddress, msg_id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub inter_segment_delay_ms: u64,
    pub reassembly_timeout_ms: u64,
    /// Serial device path; unset means an in-memory pipe.
    pub port: Option<String>,
    pub baud: u32,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { inter_segment_delay_ms: 60, reassembly_timeout_ms: 10_000, port: None, baud: 115_200 }
    }
}

impl BridgeConfig {
    pub fn inter_segment_delay(&self) -> Duration {
        Duration::from_millis(self.inter_segment_delay_ms)
    }

    pub fn reassembly_timeout(&self) -> Duration {
        Duration::from_millis(self.reassembly_timeout_ms)
    }
}

/// Per-node message id counter, wrapping at 2^32.
#[derive(Debug, Clone, Default)]
pub struct MsgIdAllocator {
    next: u32,
}

impl MsgIdAllocator {
    pub fn starting_at(next: u32) -> Self {
        MsgIdAllocator { next }
    }

    pub fn next_id(&mut self) -> u32 {
        let id = self.next;
        self.next = self.next.wrapping_add(1);
        id
    }
}

/// Timestamps of the writes that carried one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteReport {
    pub msg_id: u32,
    pub writes: Vec<Instant>,
}

impl WriteReport {
    /// Time from the start of the first write to the start of the last.
    pub fn span(&self) -> Duration {
        match (self.writes.first(), self.writes.last()) {
            (Some(a), Some(b)) => b.duration_since(*a),
            _ => Duration::ZERO,
        }
    }
}

/// Resolves once the last frame of a message has been written.
#[derive(Debug)]
pub struct SendHandle {
    msg_id: u32,
    rx: mpsc::Receiver<Result<WriteReport, BridgeError>>,
}

impl SendHandle {
    pub fn msg_id(&self) -> u32 {
        self.msg_id
    }

    pub fn wait(self) -> Result<WriteReport, BridgeError> {
        self.rx.recv().unwrap_or_else(|_| Err(BridgeError::Transport("writer stopped".into())))
    }
}

struct WriteJob {
    msg_id: u32,
    frames: Vec<Vec<u8>>,
    reply: mpsc::Sender<Result<WriteReport, BridgeError>>,
}

/// A bridge bound to a real byte port. One writer thread owns the port's
/// write side and enforces the inter-segment delay.
pub struct Bridge {
    jobs: Option<mpsc::Sender<WriteJob>>,
    writer: Option<JoinHandle<()>>,
    delay_ms: Arc<AtomicU64>,
    open: Arc<AtomicBool>,
    ids: MsgIdAllocator,
    inbound: Inbound,
    epoch: Instant,
}

impl Bridge {
    pub fn new<W: Write + Send + 'static>(port: W, config: &BridgeConfig) -> Self {
        let delay_ms = Arc::new(AtomicU64::new(config.inter_segment_delay_ms));
        let open = Arc::new(AtomicBool::new(true));
        let (jobs, rx) = mpsc::channel();
        let writer = {
            let delay_ms = delay_ms.clone();
            let open = open.clone();
            thread::spawn(move || write_loop(port, rx, &delay_ms, &open))
        };
        Bridge {
            jobs: Some(jobs),
            writer: Some(writer),
            delay_ms,
            open,
            ids: MsgIdAllocator::default(),
            inbound: Inbound::new(config.reassembly_timeout()),
            epoch: Instant::now(),
        }
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::SeqCst)
    }

    pub fn inter_segment_delay(&self) -> Duration {
        Duration::from_millis(self.delay_ms.load(Ordering::SeqCst))
    }

    pub fn set_inter_segment_delay(&self, ms: u64) {
        self.delay_ms.store(ms, Ordering::SeqCst);
    }

    pub fn bridge_send(&mut self, payload: &MessagePayload, dst: DeviceAddress) -> Result<SendHandle, BridgeError> {
        if !self.is_open() {
            return Err(BridgeError::Transport("port closed".into()));
        }
        let msg_id = self.ids.next_id();
        let frames = encode_message_bytes(payload.as_bytes(), dst, msg_id)?;
        let (reply, rx) = mpsc::channel();
        self.jobs
            .as_ref()
            .expect("present until drop")
            .send(WriteJob { msg_id, frames, reply })
            .map_err(|_| BridgeError::Transport("writer stopped".into()))?;
        Ok(SendHandle { msg_id, rx })
    }

    /// Feeds bytes read from the port; returns deliveries and error events.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Vec<InboundEvent> {
        let now = elapsed(self.epoch);
        self.inbound.on_bytes(bytes, now)
    }

    /// Evicts partial messages that have outlived the reassembly timeout.
    pub fn poll_timeouts(&mut self) -> Vec<InboundEvent> {
        let now = elapsed(self.epoch);
        self.inbound.expire(now)
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

fn elapsed(epoch: Instant) -> SimTime {
    SimTime(epoch.elapsed().as_micros() as u64)
}

fn write_loop<W: Write>(mut port: W, jobs: mpsc::Receiver<WriteJob>, delay_ms: &AtomicU64, open: &AtomicBool) {
    let mut last: Option<Instant> = None;
    for job in jobs {
        let result = if open.load(Ordering::SeqCst) {
            let mut writes = Vec::with_capacity(job.frames.len());
            let mut failure = None;
            for frame in &job.frames {
                if let Some(last) = last {
                    let due = last + Duration::from_millis(delay_ms.load(Ordering::SeqCst));
                    let now = Instant::now();
                    if due > now {
                        thread::sleep(due - now);
                    }
                }
                let start = Instant::now();
                if let Err(e) = port.write_all(frame).and_then(|_| port.flush()) {
                    open.store(false, Ordering::SeqCst);
                    failure = Some(BridgeError::Transport(e.to_string()));
                    break;
                }
                last = Some(start);
                writes.push(start);
            }
            match failure {
                Some(e) => Err(e),
                None => Ok(WriteReport { msg_id: job.msg_id, writes }),
            }
        } else {
            Err(BridgeError::Transport("port closed".into()))
        };
        let _ = job.reply.send(result);
    }
}

/// Runs the receive half on its own thread, handing events over a channel.
/// The thread ends at end-of-file, on a port error (reported as a transport
/// event), or once the receiver is dropped.
pub fn spawn_reader<R: Read + Send + 'static>(
    mut port: R,
    config: &BridgeConfig,
) -> (mpsc::Receiver<InboundEvent>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel();
    let mut inbound = Inbound::new(config.reassembly_timeout());
    let handle = thread::spawn(move || {
        let epoch = Instant::now();
        let mut buf = [0u8; 1024];
        loop {
            let events = match port.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => inbound.on_bytes(&buf[..n], elapsed(epoch)),
                Err(e) if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) => {
                    inbound.expire(elapsed(epoch))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    let _ = tx.send(InboundEvent::Error(BridgeError::Transport(e.to_string())));
                    break;
                }
            };
            for event in events {
                if tx.send(event).is_err() {
                    return;
                }
            }
        }
    });
    (rx, handle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(len: usize) -> MessagePayload {
        MessagePayload::new((0..len).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn config_defaults() {
        let cfg = BridgeConfig::default();
        assert_eq!(cfg.inter_segment_delay_ms, 60);
        assert_eq!(cfg.reassembly_timeout_ms, 10_000);
        assert_eq!(cfg.baud, 115_200);
        assert_eq!(cfg.port, None);
        let cfg: BridgeConfig = toml::from_str("port = \"/dev/ttyACM0\"\nbaud = 9600").unwrap();
        assert_eq!(cfg.port.as_deref(), Some("/dev/ttyACM0"));
        assert_eq!(cfg.inter_segment_delay_ms, 60);
    }

    #[test]
    fn msg_ids_wrap() {
        let mut ids = MsgIdAllocator::starting_at(u32::MAX);
        assert_eq!(ids.next_id(), u32::MAX);
        assert_eq!(ids.next_id(), 0);
    }

    #[test]
    fn short_payload_is_one_write() {
        let (a, _b) = pipe();
        let mut bridge = Bridge::new(a, &BridgeConfig::default());
        let report = bridge.bridge_send(&payload(2), DeviceAddress::from_mesh(0x23)).unwrap().wait().unwrap();
        assert_eq!(report.writes.len(), 1);
        assert_eq!(report.span(), Duration::ZERO);
    }

    #[test]
    fn long_payload_respects_delay() {
        let (a, _b) = pipe();
        let mut bridge = Bridge::new(a, &BridgeConfig::default());
        let report = bridge.bridge_send(&payload(2000), DeviceAddress::from_mesh(0x23)).unwrap().wait().unwrap();
        assert_eq!(report.writes.len(), 18);
        assert!(report.span() >= Duration::from_millis(17 * 60));
        for pair in report.writes.windows(2) {
            assert!(pair[1] - pair[0] >= Duration::from_millis(60));
        }
    }

    #[test]
    fn delay_can_be_changed() {
        let (a, _b) = pipe();
        let mut bridge = Bridge::new(a, &BridgeConfig::default());
        bridge.set_inter_segment_delay(10);
        assert_eq!(bridge.inter_segment_delay(), Duration::from_millis(10));
        let report = bridge.bridge_send(&payload(2000), DeviceAddress::from_mesh(0x23)).unwrap().wait().unwrap();
        assert!(report.span() >= Duration::from_millis(170));
        assert!(report.span() < Duration::from_millis(17 * 60));
    }

    #[test]
    fn closed_port_is_a_transport_error() {
        let (a, b) = pipe();
        b.close();
        let mut bridge = Bridge::new(a, &BridgeConfig::default());
        let first = bridge.bridge_send(&payload(5), DeviceAddress::from_mesh(0x23)).unwrap().wait();
        assert!(matches!(first, Err(BridgeError::Transport(_))));
        assert!(!bridge.is_open());
        assert!(matches!(
            bridge.bridge_send(&payload(5), DeviceAddress::from_mesh(0x23)),
            Err(BridgeError::Transport(_))
        ));
    }

    #[test]
    fn on_bytes_delivers() {
        let (a, _b) = pipe();
        let mut bridge = Bridge::new(a, &BridgeConfig::default());
        let bytes = encode_message_bytes(b"hello", DeviceAddress::from_mesh(0x27), 3).unwrap().concat();
        let events = bridge.on_bytes(&bytes);
        assert!(matches!(&events[..], [InboundEvent::Delivered { msg_id: 3, .. }]));
        assert!(bridge.poll_timeouts().is_empty());
    }
}
