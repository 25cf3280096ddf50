//! The host ties connections to the mesh: it learns peers from presence
//! broadcasts, exchanges peer ids over the Bridge, drives each connection's
//! upgrade, fragments records into Bridge-sized messages and runs the
//! keep-alive probe. It is clock-free; time comes in with every call and
//! timers go out as [`HostOutput::Timer`].

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::HostConfig;
use super::connection::{ConnError, ConnEvent, Connection, Phase, Protocols, Stage};
use super::multistream::Side;
use super::peer_id::{Keypair, PeerId};
use super::routing::RoutingTable;
use crate::frame_codec::MAX_PAYLOAD_LEN;
use crate::mesh::MeshAddress;
use crate::sim::SimTime;

const TAG_HELLO: u8 = 0x01;
const TAG_HELLO_REPLY: u8 = 0x02;
const TAG_CLOSE: u8 = 0x03;
const TAG_RECORD: u8 = 0x10;
const FRAGMENT_HEADER_LEN: usize = 1 + 4 + 2 + 2;
pub const MAX_FRAGMENT_CHUNK: usize = MAX_PAYLOAD_LEN - FRAGMENT_HEADER_LEN;
/// Partially received records older than this are dropped.
const FRAGMENT_TTL: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HostError {
    #[error("peer {0} is not in the routing table")]
    UnknownPeer(PeerId),
    #[error("no ready connection to {0}")]
    NotConnected(PeerId),
    #[error(transparent)]
    Connection(#[from] ConnError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum HostTimer {
    ConnectTimeout { peer: PeerId, epoch: u64 },
    KeepAlive { peer: PeerId, epoch: u64 },
    ProbeTimeout { peer: PeerId, epoch: u64, nonce: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostEvent {
    PeerDiscovered { peer: PeerId, addr: MeshAddress, new: bool },
    Connected { peer: PeerId, side: Side },
    ConnectFailed { peer: PeerId, stage: Stage, reason: String },
    Disconnected { peer: PeerId, reason: String },
    StreamOpened { peer: PeerId, stream: u64, protocol: String },
    Data { peer: PeerId, stream: u64, data: Vec<u8> },
    ProbeSent { peer: PeerId },
    ProbeAnswered { peer: PeerId, rtt: Duration },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostOutput {
    /// A Bridge message for the mesh client at `to`.
    Transmit {
        to: MeshAddress,
        payload: Vec<u8>,
        tag: Option<u64>,
    },
    Timer {
        at: SimTime,
        timer: HostTimer,
    },
    Event(HostEvent),
}

/// Work submitted from other threads, applied by [`Host::process_commands`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Connect(PeerId),
    Send { peer: PeerId, data: Vec<u8>, tag: Option<u64> },
    Disconnect(PeerId),
}

#[derive(Debug, Clone)]
pub struct CommandSender(mpsc::Sender<Command>);

impl CommandSender {
    /// Returns false once the host is gone.
    pub fn submit(&self, cmd: Command) -> bool {
        self.0.send(cmd).is_ok()
    }
}

#[derive(Debug)]
struct Probe {
    nonce: u64,
    sent_at: SimTime,
}

#[derive(Debug, Default)]
struct PeerState {
    conn: Option<Connection>,
    dialing: Option<u32>,
    epoch: u64,
    probe: Option<Probe>,
    missed: u32,
    held: VecDeque<(Vec<u8>, Option<u64>)>,
}

#[derive(Debug)]
struct Fragments {
    count: u16,
    chunks: BTreeMap<u16, Vec<u8>>,
    started: SimTime,
}

pub struct Host {
    keypair: Keypair,
    peer_id: PeerId,
    addr: MeshAddress,
    cfg: HostConfig,
    protocols: Protocols,
    rng: ChaCha8Rng,
    routing: RoutingTable,
    peers: BTreeMap<PeerId, PeerState>,
    fragments: BTreeMap<(MeshAddress, u32), Fragments>,
    next_record_id: u32,
    next_nonce: u64,
    out: Vec<HostOutput>,
    cmd_tx: mpsc::Sender<Command>,
    cmd_rx: mpsc::Receiver<Command>,
}

impl Host {
    pub fn new(keypair: Keypair, addr: MeshAddress, cfg: HostConfig, rng: ChaCha8Rng) -> Self {
        let (cmd_tx, cmd_rx) = mpsc::channel();
        Host {
            peer_id: keypair.peer_id(),
            keypair,
            addr,
            protocols: cfg.protocols(),
            cfg,
            rng,
            routing: RoutingTable::new(),
            peers: BTreeMap::new(),
            fragments: BTreeMap::new(),
            next_record_id: 0,
            next_nonce: 0,
            out: Vec::new(),
            cmd_tx,
            cmd_rx,
        }
    }

    pub fn peer_id(&self) -> &PeerId {
        &self.peer_id
    }

    pub fn addr(&self) -> MeshAddress {
        self.addr
    }

    pub fn config(&self) -> &HostConfig {
        &self.cfg
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn commands(&self) -> CommandSender {
        CommandSender(self.cmd_tx.clone())
    }

    pub fn phase(&self, peer: &PeerId) -> Phase {
        match self.peers.get(peer).and_then(|s| s.conn.as_ref()) {
            Some(c) => c.phase(),
            None => Phase::Idle,
        }
    }

    pub fn is_connected(&self, peer: &PeerId) -> bool {
        self.phase(peer) == Phase::Ready
    }

    pub fn connection(&self, peer: &PeerId) -> Option<&Connection> {
        self.peers.get(peer).and_then(|s| s.conn.as_ref())
    }

    /// Whether app data to `peer` is being held behind a probe.
    pub fn probe_outstanding(&self, peer: &PeerId) -> bool {
        self.peers.get(peer).is_some_and(|s| s.probe.is_some())
    }

    /// Forgets every peer, connection and partial record, as after a
    /// restart. The identity and record counters survive.
    pub fn reset(&mut self) {
        self.routing.clear();
        self.peers.clear();
        self.fragments.clear();
        self.out.clear();
    }

    fn take_out(&mut self) -> Vec<HostOutput> {
        std::mem::take(&mut self.out)
    }

    fn emit(&mut self, e: HostEvent) {
        self.out.push(HostOutput::Event(e));
    }

    fn transmit(&mut self, to: MeshAddress, payload: Vec<u8>, tag: Option<u64>) {
        self.out.push(HostOutput::Transmit { to, payload, tag });
    }

    fn timer(&mut self, at: SimTime, timer: HostTimer) {
        self.out.push(HostOutput::Timer { at, timer });
    }

    fn hello(&self, tag: u8) -> Vec<u8> {
        let mut p = vec![tag];
        p.extend_from_slice(self.peer_id.as_str().as_bytes());
        p
    }

    /// A presence broadcast arrived from the mesh client at `from`.
    pub fn on_presence(&mut self, from: MeshAddress, payload: &[u8], now: SimTime) -> Vec<HostOutput> {
        let Some(peer) = std::str::from_utf8(payload).ok().and_then(PeerId::parse) else {
            return Vec::new();
        };
        if peer != self.peer_id {
            let new = self.routing.learn(peer.clone(), from, now);
            self.emit(HostEvent::PeerDiscovered { peer, addr: from, new });
        }
        self.take_out()
    }

    /// Starts dialing `peer`. A no-op while a connection to it is ready or
    /// being set up.
    pub fn connect(&mut self, peer: &PeerId, now: SimTime) -> Result<Vec<HostOutput>, HostError> {
        let addr = self.routing.lookup(peer).ok_or_else(|| HostError::UnknownPeer(peer.clone()))?;
        let state = self.peers.entry(peer.clone()).or_default();
        let busy = state.dialing.is_some() || state.conn.as_ref().is_some_and(|c| !c.is_failed());
        if !busy {
            state.conn = None;
            self.dial(peer, addr, 1, now);
        }
        Ok(self.take_out())
    }

    fn dial(&mut self, peer: &PeerId, addr: MeshAddress, attempt: u32, now: SimTime) {
        let state = self.peers.entry(peer.clone()).or_default();
        state.dialing = Some(attempt);
        state.epoch += 1;
        let epoch = state.epoch;
        let hello = self.hello(TAG_HELLO);
        self.transmit(addr, hello, None);
        let at = now + Duration::from_secs_f64(self.cfg.connect_timeout_s);
        self.timer(at, HostTimer::ConnectTimeout { peer: peer.clone(), epoch });
    }

    /// A Bridge message from the mesh client at `from`.
    pub fn on_transport(&mut self, from: MeshAddress, payload: &[u8], now: SimTime) -> Vec<HostOutput> {
        match payload.split_first() {
            Some((&TAG_HELLO, id)) => self.on_hello(from, id, false, now),
            Some((&TAG_HELLO_REPLY, id)) => self.on_hello(from, id, true, now),
            Some((&TAG_CLOSE, _)) => {
                // a close that overtakes our redial belongs to the old
                // connection
                if let Some(peer) = self.routing.peer_at(from).cloned() {
                    if self.peers.get(&peer).is_some_and(|s| s.conn.is_some()) {
                        self.drop_connection(&peer, "closed by peer", false);
                    }
                }
            }
            Some((&TAG_RECORD, rest)) => self.on_fragment(from, rest, now),
            _ => {}
        }
        self.take_out()
    }

    fn on_hello(&mut self, from: MeshAddress, id: &[u8], reply: bool, now: SimTime) {
        let Some(peer) = std::str::from_utf8(id).ok().and_then(PeerId::parse) else { return };
        if peer == self.peer_id {
            return;
        }
        if self.routing.learn(peer.clone(), from, now) {
            self.emit(HostEvent::PeerDiscovered { peer: peer.clone(), addr: from, new: true });
        }
        let state = self.peers.entry(peer.clone()).or_default();
        if reply {
            if state.dialing.is_some() && state.conn.is_none() {
                let conn = Connection::new(Side::Initiator, self.keypair.clone(), peer.clone(), self.protocols.clone());
                state.conn = Some(conn);
                self.flush(&peer, None, now);
            }
            return;
        }
        // simultaneous open: the smaller id keeps the initiator role
        if state.dialing.is_some() && state.conn.is_none() && self.peer_id < peer {
            return;
        }
        if state.conn.as_ref().is_some_and(|c| c.is_ready()) {
            self.drop_connection(&peer, "peer reconnected", false);
        }
        let state = self.peers.entry(peer.clone()).or_default();
        state.dialing = None;
        state.epoch += 1;
        let epoch = state.epoch;
        state.conn = Some(Connection::new(Side::Responder, self.keypair.clone(), peer.clone(), self.protocols.clone()));
        let reply = self.hello(TAG_HELLO_REPLY);
        self.transmit(from, reply, None);
        let at = now + Duration::from_secs_f64(self.cfg.connect_timeout_s);
        self.timer(at, HostTimer::ConnectTimeout { peer: peer.clone(), epoch });
        self.flush(&peer, None, now);
    }

    fn on_fragment(&mut self, from: MeshAddress, rest: &[u8], now: SimTime) {
        if rest.len() < FRAGMENT_HEADER_LEN - 1 {
            return;
        }
        let record_id = u32::from_be_bytes(rest[..4].try_into().unwrap());
        let idx = u16::from_be_bytes(rest[4..6].try_into().unwrap());
        let count = u16::from_be_bytes(rest[6..8].try_into().unwrap());
        let chunk = &rest[8..];
        if count == 0 || idx >= count {
            return;
        }
        self.fragments.retain(|_, f| f.started + FRAGMENT_TTL > now);
        let entry = self.fragments.entry((from, record_id)).or_insert_with(|| Fragments {
            count,
            chunks: BTreeMap::new(),
            started: now,
        });
        if entry.count != count {
            self.fragments.remove(&(from, record_id));
            return;
        }
        entry.chunks.insert(idx, chunk.to_vec());
        if entry.chunks.len() < count as usize {
            return;
        }
        let entry = self.fragments.remove(&(from, record_id)).expect("present");
        let record: Vec<u8> = entry.chunks.into_values().flatten().collect();
        let Some(peer) = self.routing.peer_at(from).cloned() else { return };
        let Some(conn) = self.peers.get_mut(&peer).and_then(|s| s.conn.as_mut()) else { return };
        conn.on_record(&record, &mut self.rng);
        self.flush(&peer, None, now);
    }

    /// Sends whatever the connection has queued and handles its events.
    fn flush(&mut self, peer: &PeerId, tag: Option<u64>, now: SimTime) {
        let Some(addr) = self.routing.lookup(peer) else { return };
        let mut records = Vec::new();
        let mut events = Vec::new();
        if let Some(conn) = self.peers.get_mut(peer).and_then(|s| s.conn.as_mut()) {
            records.extend(std::iter::from_fn(|| conn.poll_transmit()));
            events.extend(std::iter::from_fn(|| conn.poll_event()));
        }
        for rec in records {
            self.send_record(addr, &rec, tag);
        }
        for ev in events {
            self.on_conn_event(peer, ev, now);
        }
    }

    fn send_record(&mut self, to: MeshAddress, record: &[u8], tag: Option<u64>) {
        let record_id = self.next_record_id;
        self.next_record_id = self.next_record_id.wrapping_add(1);
        let chunks: Vec<&[u8]> = record.chunks(MAX_FRAGMENT_CHUNK).collect();
        let count = chunks.len() as u16;
        for (idx, chunk) in chunks.into_iter().enumerate() {
            let mut p = Vec::with_capacity(FRAGMENT_HEADER_LEN + chunk.len());
            p.push(TAG_RECORD);
            p.extend_from_slice(&record_id.to_be_bytes());
            p.extend_from_slice(&(idx as u16).to_be_bytes());
            p.extend_from_slice(&count.to_be_bytes());
            p.extend_from_slice(chunk);
            self.transmit(to, p, tag);
        }
    }

    fn on_conn_event(&mut self, peer: &PeerId, ev: ConnEvent, now: SimTime) {
        match ev {
            ConnEvent::Ready { .. } => {
                let state = self.peers.get_mut(peer).expect("connection implies state");
                state.dialing = None;
                state.missed = 0;
                let epoch = state.epoch;
                let side = state.conn.as_ref().map(|c| c.side()).expect("ready connection");
                self.emit(HostEvent::Connected { peer: peer.clone(), side });
                if side == Side::Initiator && self.cfg.keep_alive_s > 0.0 {
                    let at = now + Duration::from_secs_f64(self.cfg.keep_alive_s);
                    self.timer(at, HostTimer::KeepAlive { peer: peer.clone(), epoch });
                }
            }
            ConnEvent::Failed { stage, reason } => {
                let state = self.peers.get_mut(peer).expect("connection implies state");
                state.dialing = None;
                self.emit(HostEvent::ConnectFailed { peer: peer.clone(), stage, reason: reason.clone() });
                self.drop_connection(peer, &reason, true);
            }
            ConnEvent::StreamOpened { stream, protocol } => {
                self.emit(HostEvent::StreamOpened { peer: peer.clone(), stream, protocol });
            }
            ConnEvent::Data { stream, data } => {
                self.emit(HostEvent::Data { peer: peer.clone(), stream, data });
            }
            ConnEvent::Pong { data } => {
                let Ok(nonce) = <[u8; 8]>::try_from(data.as_slice()).map(u64::from_be_bytes) else { return };
                let state = self.peers.get_mut(peer).expect("connection implies state");
                if let Some(probe) = state.probe.take_if(|p| p.nonce == nonce) {
                    state.missed = 0;
                    let rtt = now.saturating_since(probe.sent_at);
                    self.emit(HostEvent::ProbeAnswered { peer: peer.clone(), rtt });
                    self.release_held(peer, now);
                }
            }
            ConnEvent::StreamRejected { .. } | ConnEvent::StreamClosed { .. } => {}
        }
    }

    /// Discards the connection to `peer`. `notify` sends a close message so
    /// the other side does not wait for a timeout.
    fn drop_connection(&mut self, peer: &PeerId, reason: &str, notify: bool) {
        let Some(state) = self.peers.get_mut(peer) else { return };
        let was_ready = state.conn.as_ref().is_some_and(|c| c.is_ready());
        let had_conn = state.conn.take().is_some();
        state.dialing = None;
        state.probe = None;
        state.held.clear();
        state.epoch += 1;
        if notify && had_conn {
            if let Some(addr) = self.routing.lookup(peer) {
                self.transmit(addr, vec![TAG_CLOSE], None);
            }
        }
        if was_ready {
            self.emit(HostEvent::Disconnected { peer: peer.clone(), reason: reason.to_string() });
        }
    }

    pub fn on_timer(&mut self, timer: HostTimer, now: SimTime) -> Vec<HostOutput> {
        match timer {
            HostTimer::ConnectTimeout { peer, epoch } => self.on_connect_timeout(&peer, epoch, now),
            HostTimer::KeepAlive { peer, epoch } => self.on_keep_alive(&peer, epoch, now),
            HostTimer::ProbeTimeout { peer, epoch, nonce } => {
                let Some(state) = self.peers.get_mut(&peer) else { return Vec::new() };
                if state.epoch == epoch && state.probe.as_ref().is_some_and(|p| p.nonce == nonce) {
                    state.probe = None;
                    state.missed += 1;
                    if state.missed >= self.cfg.max_missed_probes {
                        self.drop_connection(&peer, "keep-alive unanswered", true);
                    } else {
                        self.release_held(&peer, now);
                    }
                }
            }
        }
        self.take_out()
    }

    fn on_connect_timeout(&mut self, peer: &PeerId, epoch: u64, now: SimTime) {
        let Some(state) = self.peers.get_mut(peer) else { return };
        if state.epoch != epoch || state.conn.as_ref().is_some_and(|c| c.is_ready() || c.is_failed()) {
            return;
        }
        match state.dialing {
            Some(attempt) if attempt < self.cfg.connect_attempts => {
                state.conn = None;
                match self.routing.lookup(peer) {
                    Some(addr) => self.dial(peer, addr, attempt + 1, now),
                    None => self.give_up(peer),
                }
            }
            Some(_) => self.give_up(peer),
            // a responder whose dialer went quiet
            None => {
                state.conn = None;
            }
        }
    }

    fn give_up(&mut self, peer: &PeerId) {
        if let Some(state) = self.peers.get_mut(peer) {
            state.dialing = None;
            state.conn = None;
            state.epoch += 1;
        }
        self.emit(HostEvent::ConnectFailed {
            peer: peer.clone(),
            stage: Stage::Connect,
            reason: format!("no connection after {} attempts", self.cfg.connect_attempts),
        });
    }

    fn on_keep_alive(&mut self, peer: &PeerId, epoch: u64, now: SimTime) {
        let nonce = self.next_nonce;
        let Some(state) = self.peers.get_mut(peer) else { return };
        if state.epoch != epoch {
            return;
        }
        let Some(conn) = state.conn.as_mut().filter(|c| c.is_ready()) else { return };
        if conn.ping(&nonce.to_be_bytes()).is_err() {
            return;
        }
        self.next_nonce += 1;
        state.probe = Some(Probe { nonce, sent_at: now });
        self.emit(HostEvent::ProbeSent { peer: peer.clone() });
        self.flush(peer, None, now);
        let probe_at = now + Duration::from_secs_f64(self.cfg.probe_timeout_s);
        self.timer(probe_at, HostTimer::ProbeTimeout { peer: peer.clone(), epoch, nonce });
        let next = now + Duration::from_secs_f64(self.cfg.keep_alive_s);
        self.timer(next, HostTimer::KeepAlive { peer: peer.clone(), epoch });
    }

    fn release_held(&mut self, peer: &PeerId, now: SimTime) {
        let held: Vec<_> = match self.peers.get_mut(peer) {
            Some(state) => state.held.drain(..).collect(),
            None => return,
        };
        for (data, tag) in held {
            let _ = self.send_now(peer, &data, tag, now);
        }
    }

    /// Sends application bytes on the connection's app stream. While a
    /// liveness probe is outstanding the bytes wait for its answer.
    pub fn send(
        &mut self,
        peer: &PeerId,
        data: &[u8],
        tag: Option<u64>,
        now: SimTime,
    ) -> Result<Vec<HostOutput>, HostError> {
        let state = self.peers.get_mut(peer).filter(|s| s.conn.as_ref().is_some_and(|c| c.is_ready()));
        let Some(state) = state else { return Err(HostError::NotConnected(peer.clone())) };
        if state.probe.is_some() {
            state.held.push_back((data.to_vec(), tag));
        } else {
            self.send_now(peer, data, tag, now)?;
        }
        Ok(self.take_out())
    }

    fn send_now(&mut self, peer: &PeerId, data: &[u8], tag: Option<u64>, now: SimTime) -> Result<(), HostError> {
        let conn = self
            .peers
            .get_mut(peer)
            .and_then(|s| s.conn.as_mut())
            .ok_or_else(|| HostError::NotConnected(peer.clone()))?;
        let stream = conn.app_stream().ok_or_else(|| HostError::NotConnected(peer.clone()))?;
        conn.send(stream, data)?;
        self.flush(peer, tag, now);
        Ok(())
    }

    /// Opens an additional stream on a ready connection.
    pub fn open_stream(
        &mut self,
        peer: &PeerId,
        protocol: &str,
        now: SimTime,
    ) -> Result<(u64, Vec<HostOutput>), HostError> {
        let conn = self
            .peers
            .get_mut(peer)
            .and_then(|s| s.conn.as_mut())
            .ok_or_else(|| HostError::NotConnected(peer.clone()))?;
        let id = conn.open_stream(protocol)?;
        self.flush(peer, None, now);
        Ok((id, self.take_out()))
    }

    pub fn send_on(
        &mut self,
        peer: &PeerId,
        stream: u64,
        data: &[u8],
        now: SimTime,
    ) -> Result<Vec<HostOutput>, HostError> {
        let conn = self
            .peers
            .get_mut(peer)
            .and_then(|s| s.conn.as_mut())
            .ok_or_else(|| HostError::NotConnected(peer.clone()))?;
        conn.send(stream, data)?;
        self.flush(peer, None, now);
        Ok(self.take_out())
    }

    pub fn disconnect(&mut self, peer: &PeerId) -> Vec<HostOutput> {
        self.drop_connection(peer, "closed locally", true);
        self.take_out()
    }

    /// Applies commands submitted through [`Host::commands`]. Errors are
    /// reported as events rather than returned.
    pub fn process_commands(&mut self, now: SimTime) -> Vec<HostOutput> {
        let mut out = Vec::new();
        while let Ok(cmd) = self.cmd_rx.try_recv() {
            let result = match cmd {
                Command::Connect(peer) => self.connect(&peer, now).map_err(|e| (peer, e)),
                Command::Send { peer, data, tag } => self.send(&peer, &data, tag, now).map_err(|e| (peer, e)),
                Command::Disconnect(peer) => Ok(self.disconnect(&peer)),
            };
            match result {
                Ok(o) => out.extend(o),
                Err((peer, e)) => out.push(HostOutput::Event(HostEvent::ConnectFailed {
                    peer,
                    stage: Stage::Connect,
                    reason: e.to_string(),
                })),
            }
        }
        out
    }
}

impl std::fmt::Debug for Host {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Host")
            .field("peer_id", &self.peer_id)
            .field("addr", &self.addr)
            .field("peers", &self.peers.len())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EventQueue;
    use rand::SeedableRng;

    enum Ev {
        Deliver { to: usize, from: MeshAddress, payload: Vec<u8> },
        Timer { host: usize, timer: HostTimer },
    }

    struct Net {
        hosts: Vec<Host>,
        q: EventQueue<Ev>,
        offline: Vec<bool>,
        events: Vec<(usize, SimTime, HostEvent)>,
        transmits: Vec<(usize, Option<u64>, SimTime)>,
    }

    impl Net {
        fn new(n: usize, cfg: HostConfig) -> Self {
            let hosts = (0..n)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                    let kp = Keypair::generate(&mut rng);
                    Host::new(kp, MeshAddress(0x10 + i as u16), cfg.clone(), rng)
                })
                .collect();
            Net { hosts, q: EventQueue::new(), offline: vec![false; n], events: Vec::new(), transmits: Vec::new() }
        }

        fn index(&self, addr: MeshAddress) -> usize {
            (addr.0 - 0x10) as usize
        }

        fn apply(&mut self, host: usize, out: Vec<HostOutput>) {
            let now = self.q.now();
            for o in out {
                match o {
                    HostOutput::Transmit { to, payload, tag } => {
                        self.transmits.push((host, tag, now));
                        let from = self.hosts[host].addr();
                        let to = self.index(to);
                        self.q.schedule_in(Duration::from_millis(100), Ev::Deliver { to, from, payload });
                    }
                    HostOutput::Timer { at, timer } => {
                        self.q.schedule(at, Ev::Timer { host, timer }).unwrap();
                    }
                    HostOutput::Event(e) => self.events.push((host, now, e)),
                }
            }
        }

        fn announce_all(&mut self) {
            for i in 0..self.hosts.len() {
                let id = self.hosts[i].peer_id().as_str().as_bytes().to_vec();
                let from = self.hosts[i].addr();
                for j in 0..self.hosts.len() {
                    if i != j {
                        let out = self.hosts[j].on_presence(from, &id, self.q.now());
                        self.apply(j, out);
                    }
                }
            }
        }

        fn run_until(&mut self, t: SimTime) {
            while self.q.peek_time().is_some_and(|at| at <= t) {
                let ev = self.q.pop().unwrap();
                let now = ev.at;
                match ev.action {
                    Ev::Deliver { to, from, payload } => {
                        if !self.offline[to] {
                            let out = self.hosts[to].on_transport(from, &payload, now);
                            self.apply(to, out);
                        }
                    }
                    Ev::Timer { host, timer } => {
                        if !self.offline[host] {
                            let out = self.hosts[host].on_timer(timer, now);
                            self.apply(host, out);
                        }
                    }
                }
            }
        }

        fn id(&self, i: usize) -> PeerId {
            self.hosts[i].peer_id().clone()
        }

        fn connect(&mut self, from: usize, to: usize) {
            let peer = self.id(to);
            let out = self.hosts[from].connect(&peer, self.q.now()).unwrap();
            self.apply(from, out);
        }
    }

    fn secs(s: u64) -> SimTime {
        SimTime::from_millis(s * 1000)
    }

    #[test]
    fn presence_fills_routing_tables() {
        let mut net = Net::new(4, HostConfig::default());
        net.announce_all();
        for h in &net.hosts {
            assert_eq!(h.routing().len(), 3);
            assert!(h.routing().lookup(h.peer_id()).is_none());
        }
    }

    #[test]
    fn connect_and_exchange_data() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(10));
        let (a, b) = (net.id(0), net.id(1));
        assert!(net.hosts[0].is_connected(&b));
        assert!(net.hosts[1].is_connected(&a));
        assert_eq!(net.hosts[0].connection(&b).unwrap().side(), Side::Initiator);
        let out = net.hosts[0].send(&b, b"reading=21.5", Some(7), net.q.now()).unwrap();
        net.apply(0, out);
        net.run_until(secs(20));
        assert!(net
            .events
            .iter()
            .any(|(h, _, e)| *h == 1 && matches!(e, HostEvent::Data { data, .. } if data == b"reading=21.5")));
        assert!(net.transmits.iter().any(|(h, tag, _)| *h == 0 && *tag == Some(7)));
    }

    #[test]
    fn unknown_peer_is_a_lookup_error() {
        let mut net = Net::new(2, HostConfig::default());
        let b = net.id(1);
        assert_eq!(net.hosts[0].connect(&b, SimTime::ZERO).unwrap_err(), HostError::UnknownPeer(b.clone()));
        assert_eq!(net.hosts[0].send(&b, b"x", None, SimTime::ZERO).unwrap_err(), HostError::NotConnected(b));
    }

    #[test]
    fn simultaneous_open_resolves_to_one_connection() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.connect(0, 1);
        net.connect(1, 0);
        net.run_until(secs(10));
        let (a, b) = (net.id(0), net.id(1));
        let sa = net.hosts[0].connection(&b).unwrap().side();
        let sb = net.hosts[1].connection(&a).unwrap().side();
        assert_ne!(sa, sb);
        let smaller_initiates = if a < b { sa == Side::Initiator } else { sb == Side::Initiator };
        assert!(smaller_initiates);
        assert!(net.hosts[0].is_connected(&b) && net.hosts[1].is_connected(&a));
    }

    #[test]
    fn departed_peer_fails_after_retries() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.offline[1] = true;
        net.connect(0, 1);
        net.run_until(secs(400));
        let hellos = net.transmits.iter().filter(|(h, _, _)| *h == 0).count();
        assert_eq!(hellos, 3);
        let failed: Vec<_> = net
            .events
            .iter()
            .filter_map(|(_, t, e)| match e {
                HostEvent::ConnectFailed { stage, .. } => Some((*t, *stage)),
                _ => None,
            })
            .collect();
        assert_eq!(failed, vec![(secs(180), Stage::Connect)]);
    }

    #[test]
    fn keep_alive_holds_data_for_one_round_trip() {
        let cfg = HostConfig { keep_alive_s: 30.0, ..HostConfig::default() };
        let mut net = Net::new(2, cfg);
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(5));
        let b = net.id(1);
        let ready_at = net
            .events
            .iter()
            .find_map(|(h, t, e)| (*h == 0 && matches!(e, HostEvent::Connected { .. })).then_some(*t))
            .unwrap();
        let probe_at = ready_at + Duration::from_secs(30);
        net.run_until(probe_at);
        assert!(net.hosts[0].probe_outstanding(&b));
        let out = net.hosts[0].send(&b, b"held", Some(1), probe_at).unwrap();
        assert!(out.is_empty());
        net.apply(0, out);
        net.run_until(probe_at + Duration::from_secs(5));
        assert!(!net.hosts[0].probe_outstanding(&b));
        let sent = net.transmits.iter().find(|(_, tag, _)| *tag == Some(1)).unwrap().2;
        // ping out and pong back, 100 ms each way
        assert_eq!(sent, probe_at + Duration::from_millis(200));
        assert!(net.events.iter().any(|(_, _, e)| matches!(e, HostEvent::ProbeAnswered { rtt, .. }
            if *rtt == Duration::from_millis(200))));
    }

    #[test]
    fn unanswered_probes_drop_the_connection() {
        let cfg = HostConfig { keep_alive_s: 30.0, ..HostConfig::default() };
        let mut net = Net::new(2, cfg);
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(5));
        net.offline[1] = true;
        net.run_until(secs(200));
        assert!(net.events.iter().any(|(h, _, e)| *h == 0 && matches!(e, HostEvent::Disconnected { .. })));
        assert!(!net.hosts[0].is_connected(&net.id(1)));
    }

    #[test]
    fn reconnect_after_restart() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(5));
        net.hosts[1].reset();
        net.announce_all();
        net.connect(1, 0);
        net.run_until(secs(10));
        let (a, b) = (net.id(0), net.id(1));
        assert!(net.hosts[0].is_connected(&b));
        assert!(net.hosts[1].is_connected(&a));
        assert_eq!(net.hosts[1].connection(&a).unwrap().side(), Side::Initiator);
    }

    #[test]
    fn stale_close_does_not_cancel_redial() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(5));
        let a = net.id(0);
        net.hosts[0].reset();
        net.announce_all();
        net.connect(0, 1);
        // host 1 closes the old connection; the close lands after the redial
        let out = net.hosts[1].disconnect(&a);
        net.apply(1, out);
        net.run_until(secs(10));
        assert!(net.hosts[0].is_connected(&net.id(1)));
        assert!(net.hosts[1].is_connected(&a));
    }

    #[test]
    fn large_records_are_fragmented() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        net.connect(0, 1);
        net.run_until(secs(5));
        let b = net.id(1);
        let big = vec![0x5Au8; 5000];
        let out = net.hosts[0].send(&b, &big, Some(9), net.q.now()).unwrap();
        let n = out.iter().filter(|o| matches!(o, HostOutput::Transmit { .. })).count();
        assert_eq!(n, 3);
        assert!(out.iter().all(|o| match o {
            HostOutput::Transmit { payload, .. } => payload.len() <= MAX_PAYLOAD_LEN,
            _ => true,
        }));
        net.apply(0, out);
        net.run_until(secs(10));
        assert!(net
            .events
            .iter()
            .any(|(h, _, e)| *h == 1 && matches!(e, HostEvent::Data { data, .. } if *data == big)));
    }

    #[test]
    fn commands_from_another_thread() {
        let mut net = Net::new(2, HostConfig::default());
        net.announce_all();
        let b = net.id(1);
        let tx = net.hosts[0].commands();
        std::thread::spawn(move || assert!(tx.submit(Command::Connect(b)))).join().unwrap();
        let out = net.hosts[0].process_commands(SimTime::ZERO);
        net.apply(0, out);
        net.run_until(secs(5));
        assert!(net.hosts[0].is_connected(&net.id(1)));
    }
}
