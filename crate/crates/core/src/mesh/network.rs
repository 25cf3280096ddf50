use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{AddressKind, MeshAddress, MeshConfig};
use crate::sim::{link_transmit, RngStreams, Scheduler, SimTime, Topology, Transmission};

pub type SendId = u64;

/// Grace period before a finished session's state is discarded, so that
/// transmissions still in flight can land.
const SESSION_LINGER: Duration = Duration::from_secs(10);
const ACK_TIMEOUT_SLACK: Duration = Duration::from_millis(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeshError {
    #[error("address {0} is already provisioned")]
    AddressInUse(MeshAddress),
    #[error("{0} is not a unicast address")]
    NotUnicast(MeshAddress),
    #[error("{0} is not a group address")]
    NotGroup(MeshAddress),
    #[error("{0} is not a valid destination")]
    InvalidDestination(MeshAddress),
    #[error("client {0} is not provisioned")]
    UnknownClient(MeshAddress),
    #[error("client {0} is offline")]
    Offline(MeshAddress),
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("payload is empty")]
    EmptyPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PayloadKind {
    /// A serial frame relayed for the host.
    Bridge,
    /// A discovery broadcast carrying a peer identity.
    Presence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshMessage {
    pub kind: PayloadKind,
    pub origin: MeshAddress,
    pub seq: u32,
    pub dst: MeshAddress,
    pub ttl: u8,
    pub payload: Vec<u8>,
    /// Opaque label carried for tracing, never transmitted.
    pub tag: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    /// Every segment was acknowledged.
    Acked,
    /// At least one segment ran out of retransmissions.
    Failed,
    /// Unacknowledged traffic (unsegmented or group) finished transmitting.
    Sent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub id: SendId,
    pub src: MeshAddress,
    pub dst: MeshAddress,
    pub outcome: SendOutcome,
    pub tag: Option<u64>,
    pub transmissions: u32,
    pub started_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub to: MeshAddress,
    pub message: Rc<MeshMessage>,
    /// When the sending client began transmitting this message.
    pub session_started_at: SimTime,
    /// Link latency of the transmission that completed the message.
    pub link_latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshOutput {
    Delivered(Delivery),
    Completed(Completion),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshEvent {
    StartNext { client: MeshAddress },
    Transmit { session: SendId, seg: u16, attempt: u32 },
    Arrive { session: SendId, seg: u16, receiver: MeshAddress, latency: Duration },
    AckTransmit { session: SendId, seg: u16, receiver: MeshAddress },
    AckArrive { session: SendId, seg: u16 },
    AckTimeout { session: SendId, seg: u16, attempt: u32 },
    Finish { session: SendId },
    Cleanup { session: SendId },
}

#[derive(Debug)]
pub struct MeshClient {
    pub unicast: MeshAddress,
    pub groups: BTreeSet<MeshAddress>,
    pub network_key_id: u32,
    online: bool,
    next_seq: u32,
    queue: VecDeque<SendId>,
    active: Option<SendId>,
    seen: BTreeSet<(MeshAddress, u32)>,
    transmissions: u64,
}

impl MeshClient {
    pub fn is_online(&self) -> bool {
        self.online
    }

    /// Whether traffic addressed to `dst` is for this client.
    pub fn accepts(&self, dst: MeshAddress) -> bool {
        dst == self.unicast || (dst.is_group() && self.groups.contains(&dst))
    }

    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }

    pub fn queued(&self) -> usize {
        self.queue.len() + self.active.is_some() as usize
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SegState {
    attempts: u32,
    acked: bool,
    exhausted: bool,
}

#[derive(Debug)]
struct Session {
    src: MeshAddress,
    message: Rc<MeshMessage>,
    kind: AddressKind,
    segmented: bool,
    segs: Vec<SegState>,
    started_at: Option<SimTime>,
    transmissions: u32,
    finished: bool,
}

#[derive(Debug)]
struct RxState {
    got: Vec<bool>,
    delivered: bool,
}

/// All mesh clients sharing one radio environment.
pub struct MeshNetwork {
    cfg: MeshConfig,
    topology: Topology,
    streams: RngStreams,
    rngs: BTreeMap<MeshAddress, ChaCha8Rng>,
    clients: BTreeMap<MeshAddress, MeshClient>,
    sessions: BTreeMap<SendId, Session>,
    rx: BTreeMap<(SendId, MeshAddress), RxState>,
    next_id: SendId,
}

impl MeshNetwork {
    pub fn new(cfg: MeshConfig, topology: Topology, seed: u64) -> Self {
        MeshNetwork {
            cfg,
            topology,
            streams: RngStreams::new(seed),
            rngs: BTreeMap::new(),
            clients: BTreeMap::new(),
            sessions: BTreeMap::new(),
            rx: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> &MeshConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn topology_mut(&mut self) -> &mut Topology {
        &mut self.topology
    }

    pub fn client(&self, addr: MeshAddress) -> Option<&MeshClient> {
        self.clients.get(&addr)
    }

    /// Registers a client. Stand-in for app-based provisioning.
    pub fn provision(
        &mut self,
        unicast: MeshAddress,
        groups: impl IntoIterator<Item = MeshAddress>,
    ) -> Result<(), MeshError> {
        if !unicast.is_unicast() {
            return Err(MeshError::NotUnicast(unicast));
        }
        if self.clients.contains_key(&unicast) {
            return Err(MeshError::AddressInUse(unicast));
        }
        let groups: BTreeSet<MeshAddress> = groups.into_iter().collect();
        if let Some(bad) = groups.iter().find(|g| !g.is_group()) {
            return Err(MeshError::NotGroup(*bad));
        }
        self.rngs.insert(unicast, self.streams.radio(unicast.0));
        self.clients.insert(
            unicast,
            MeshClient {
                unicast,
                groups,
                network_key_id: 0,
                online: true,
                next_seq: 0,
                queue: VecDeque::new(),
                active: None,
                seen: BTreeSet::new(),
                transmissions: 0,
            },
        );
        Ok(())
    }

    /// Takes a client off the air or back on. Going offline drops every
    /// queued or in-flight send and all partial receptions without
    /// reporting completions.
    pub fn set_online(&mut self, addr: MeshAddress, online: bool) -> Result<(), MeshError> {
        let client = self.clients.get_mut(&addr).ok_or(MeshError::UnknownClient(addr))?;
        client.online = online;
        if !online {
            client.queue.clear();
            client.active = None;
            client.seen.clear();
            self.sessions.retain(|_, s| s.src != addr);
            self.rx.retain(|(_, r), _| *r != addr);
        }
        Ok(())
    }

    pub fn mesh_send<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        src: MeshAddress,
        dst: MeshAddress,
        payload: Vec<u8>,
        kind: PayloadKind,
        tag: Option<u64>,
    ) -> Result<SendId, MeshError> {
        let client = self.clients.get_mut(&src).ok_or(MeshError::UnknownClient(src))?;
        if !client.online {
            return Err(MeshError::Offline(src));
        }
        let ttl = if dst.is_group() { self.cfg.relay_ttl } else { 0 };
        let seq = client.next_seq;
        client.next_seq = client.next_seq.wrapping_add(1);
        let message = MeshMessage { kind, origin: src, seq, dst, ttl, payload, tag };
        self.enqueue(q, src, Rc::new(message))
    }

    /// Announces `peer_id` to every client subscribed to the discovery group.
    pub fn broadcast_presence<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        client: MeshAddress,
        peer_id: &[u8],
    ) -> Result<SendId, MeshError> {
        let group = self.cfg.discovery_group;
        self.mesh_send(q, client, group, peer_id.to_vec(), PayloadKind::Presence, None)
    }

    fn enqueue<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        src: MeshAddress,
        message: Rc<MeshMessage>,
    ) -> Result<SendId, MeshError> {
        let len = message.payload.len();
        if len == 0 {
            return Err(MeshError::EmptyPayload);
        }
        if len > self.cfg.max_payload() {
            return Err(MeshError::PayloadTooLarge { len, max: self.cfg.max_payload() });
        }
        let kind = message.dst.kind().ok_or(MeshError::InvalidDestination(message.dst))?;
        let segmented = len > self.cfg.unsegmented_max;
        let n = self.cfg.segment_count(len);
        let id = self.next_id;
        self.next_id += 1;
        self.sessions.insert(
            id,
            Session {
                src,
                message,
                kind,
                segmented,
                segs: vec![SegState::default(); n],
                started_at: None,
                transmissions: 0,
                finished: false,
            },
        );
        let client = self.clients.get_mut(&src).expect("checked by caller");
        client.queue.push_back(id);
        if client.active.is_none() {
            q.schedule_after(Duration::ZERO, MeshEvent::StartNext { client: src });
        }
        Ok(id)
    }

    pub fn handle<Q: Scheduler<MeshEvent>>(&mut self, q: &mut Q, event: MeshEvent) -> Vec<MeshOutput> {
        let mut out = Vec::new();
        match event {
            MeshEvent::StartNext { client } => self.start_next(q, client),
            MeshEvent::Transmit { session, seg, attempt } => self.transmit(q, session, seg, attempt),
            MeshEvent::Arrive { session, seg, receiver, latency } => {
                self.arrive(q, session, seg, receiver, latency, &mut out)
            }
            MeshEvent::AckTransmit { session, seg, receiver } => self.ack_transmit(q, session, seg, receiver),
            MeshEvent::AckArrive { session, seg } => {
                let Some(s) = self.live_session(session) else { return out };
                s.segs[seg as usize].acked = true;
                self.check_acked(q, session, &mut out);
            }
            MeshEvent::AckTimeout { session, seg, attempt } => {
                let retries = self.cfg.retries_unicast;
                let Some(s) = self.live_session(session) else { return out };
                let st = &mut s.segs[seg as usize];
                if st.acked || st.attempts != attempt + 1 {
                    return out;
                }
                if attempt < retries {
                    self.transmit(q, session, seg, attempt + 1);
                } else {
                    st.exhausted = true;
                    self.check_acked(q, session, &mut out);
                }
            }
            MeshEvent::Finish { session } => {
                if self.live_session(session).is_some() {
                    self.finish(q, session, SendOutcome::Sent, &mut out);
                }
            }
            MeshEvent::Cleanup { session } => {
                self.sessions.remove(&session);
                let keys: Vec<_> = self
                    .rx
                    .range((session, MeshAddress(0))..=(session, MeshAddress(u16::MAX)))
                    .map(|(k, _)| *k)
                    .collect();
                for k in keys {
                    self.rx.remove(&k);
                }
            }
        }
        out
    }

    fn live_session(&mut self, id: SendId) -> Option<&mut Session> {
        self.sessions.get_mut(&id).filter(|s| !s.finished)
    }

    fn start_next<Q: Scheduler<MeshEvent>>(&mut self, q: &mut Q, addr: MeshAddress) {
        let Some(client) = self.clients.get_mut(&addr) else { return };
        if client.active.is_some() || !client.online {
            return;
        }
        let Some(id) = client.queue.pop_front() else { return };
        client.active = Some(id);
        let now = q.now();
        let session = self.sessions.get_mut(&id).expect("queued session exists");
        session.started_at = Some(now);
        let n = session.segs.len() as u32;
        let gap = self.cfg.tx_seg_int();
        let airtime = self.cfg.transmission_time(session.kind);
        if !session.segmented {
            q.schedule_after(Duration::ZERO, MeshEvent::Transmit { session: id, seg: 0, attempt: 0 });
            q.schedule_after(airtime, MeshEvent::Finish { session: id });
        } else if session.kind == AddressKind::Unicast {
            for j in 0..n {
                q.schedule_after(gap * j, MeshEvent::Transmit { session: id, seg: j as u16, attempt: 0 });
            }
        } else {
            let passes = 1 + self.cfg.retries_multicast;
            for pass in 0..passes {
                for j in 0..n {
                    q.schedule_after(
                        gap * (pass * n + j),
                        MeshEvent::Transmit { session: id, seg: j as u16, attempt: pass },
                    );
                }
            }
            q.schedule_after(gap * (passes * n - 1) + airtime, MeshEvent::Finish { session: id });
        }
    }

    fn receivers(&self, session: &Session) -> Vec<MeshAddress> {
        let dst = session.message.dst;
        if dst.is_unicast() {
            if dst != session.src && self.clients.contains_key(&dst) {
                vec![dst]
            } else {
                Vec::new()
            }
        } else {
            self.clients.keys().copied().filter(|&a| a != session.src).collect()
        }
    }

    fn ack_timeout(&self, a: MeshAddress, b: MeshAddress) -> Duration {
        let max_latency = self.topology.link(a.0, b.0).map(|l| l.max_latency()).unwrap_or_default();
        self.cfg.rx_seg_int() + self.cfg.transmission_time(AddressKind::Unicast) + max_latency * 2 + ACK_TIMEOUT_SLACK
    }

    fn transmit<Q: Scheduler<MeshEvent>>(&mut self, q: &mut Q, id: SendId, seg: u16, attempt: u32) {
        let Some(session) = self.sessions.get(&id).filter(|s| !s.finished) else { return };
        let src = session.src;
        if !self.clients.get(&src).is_some_and(|c| c.online) {
            return;
        }
        let airtime = self.cfg.transmission_time(session.kind);
        let needs_ack = session.segmented && session.kind == AddressKind::Unicast;
        let dst = session.message.dst;
        let receivers = self.receivers(session);
        let rng = self.rngs.get_mut(&src).expect("provisioned client has a stream");
        for receiver in receivers {
            let Some(link) = self.topology.link(src.0, receiver.0) else { continue };
            if let Transmission::Delivered(latency) = link_transmit(link, rng) {
                q.schedule_after(airtime + latency, MeshEvent::Arrive { session: id, seg, receiver, latency });
            }
        }
        if needs_ack {
            let timeout = self.ack_timeout(src, dst);
            q.schedule_after(airtime + timeout, MeshEvent::AckTimeout { session: id, seg, attempt });
        }
        let session = self.sessions.get_mut(&id).expect("checked");
        session.segs[seg as usize].attempts += 1;
        session.transmissions += 1;
        self.clients.get_mut(&src).expect("checked").transmissions += 1;
    }

    fn arrive<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        id: SendId,
        seg: u16,
        receiver: MeshAddress,
        latency: Duration,
        out: &mut Vec<MeshOutput>,
    ) {
        let Some(session) = self.sessions.get(&id) else { return };
        if !self.clients.get(&receiver).is_some_and(|c| c.online) {
            return;
        }
        let n = session.segs.len();
        let needs_ack = session.segmented && session.kind == AddressKind::Unicast;
        let message = Rc::clone(&session.message);
        let started_at = session.started_at.unwrap_or_default();
        let rx = self.rx.entry((id, receiver)).or_insert_with(|| RxState { got: vec![false; n], delivered: false });
        rx.got[seg as usize] = true;
        if needs_ack {
            q.schedule_after(self.cfg.rx_seg_int(), MeshEvent::AckTransmit { session: id, seg, receiver });
        }
        if rx.delivered || !rx.got.iter().all(|&g| g) {
            return;
        }
        rx.delivered = true;
        self.deliver(q, receiver, message, started_at, latency, out);
    }

    fn deliver<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        receiver: MeshAddress,
        message: Rc<MeshMessage>,
        session_started_at: SimTime,
        link_latency: Duration,
        out: &mut Vec<MeshOutput>,
    ) {
        let client = self.clients.get_mut(&receiver).expect("receiver exists");
        if message.origin == receiver || !client.seen.insert((message.origin, message.seq)) {
            return;
        }
        if client.accepts(message.dst) {
            out.push(MeshOutput::Delivered(Delivery {
                to: receiver,
                message: Rc::clone(&message),
                session_started_at,
                link_latency,
            }));
        }
        if message.dst.is_group() && message.ttl > 0 {
            let relayed = MeshMessage { ttl: message.ttl - 1, ..(*message).clone() };
            // relaying reuses origin and seq so duplicates are recognised
            let _ = self.enqueue(q, receiver, Rc::new(relayed));
        }
    }

    fn ack_transmit<Q: Scheduler<MeshEvent>>(&mut self, q: &mut Q, id: SendId, seg: u16, receiver: MeshAddress) {
        let Some(session) = self.sessions.get(&id).filter(|s| !s.finished) else { return };
        let src = session.src;
        if !self.clients.get(&receiver).is_some_and(|c| c.online) {
            return;
        }
        let Some(link) = self.topology.link(receiver.0, src.0) else { return };
        let rng = self.rngs.get_mut(&receiver).expect("provisioned client has a stream");
        if let Transmission::Delivered(latency) = link_transmit(link, rng) {
            let airtime = self.cfg.transmission_time(AddressKind::Unicast);
            q.schedule_after(airtime + latency, MeshEvent::AckArrive { session: id, seg });
        }
        self.clients.get_mut(&receiver).expect("checked").transmissions += 1;
    }

    fn check_acked<Q: Scheduler<MeshEvent>>(&mut self, q: &mut Q, id: SendId, out: &mut Vec<MeshOutput>) {
        let Some(session) = self.sessions.get(&id) else { return };
        if !session.segs.iter().all(|s| s.acked || s.exhausted) {
            return;
        }
        let outcome = if session.segs.iter().all(|s| s.acked) { SendOutcome::Acked } else { SendOutcome::Failed };
        self.finish(q, id, outcome, out);
    }

    fn finish<Q: Scheduler<MeshEvent>>(
        &mut self,
        q: &mut Q,
        id: SendId,
        outcome: SendOutcome,
        out: &mut Vec<MeshOutput>,
    ) {
        let session = self.sessions.get_mut(&id).expect("caller checked");
        session.finished = true;
        let src = session.src;
        out.push(MeshOutput::Completed(Completion {
            id,
            src,
            dst: session.message.dst,
            outcome,
            tag: session.message.tag,
            transmissions: session.transmissions,
            started_at: session.started_at.unwrap_or_default(),
        }));
        if let Some(client) = self.clients.get_mut(&src) {
            if client.active == Some(id) {
                client.active = None;
            }
        }
        q.schedule_after(Duration::ZERO, MeshEvent::StartNext { client: src });
        q.schedule_after(SESSION_LINGER, MeshEvent::Cleanup { session: id });
    }
}
