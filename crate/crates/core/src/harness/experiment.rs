//! The two-node experiment: a sender publishes `packet_count` messages at
//! a fixed interval to a subscriber, over the full stack. Each node is a
//! host with a serial Bridge to its mesh client; the mesh firmware turns
//! each serial frame into one mesh message and, on the far side, writes it
//! back out with the address field set to the originating client.

use std::time::Duration;

use thiserror::Error;

use super::report::{report_stats, PacketBreakdown, PacketRecord, RunReport};
use crate::bridge::{Inbound, InboundEvent, MsgIdAllocator, SegmentQueue};
use crate::frame_codec::{encode_message, DeviceAddress, DST_LEN, HEADER_LEN};
use crate::mesh::{MeshAddress, MeshEvent, MeshNetwork, MeshOutput, PayloadKind, SendOutcome};
use crate::p2p::{Host, HostEvent, HostOutput, HostTimer, Keypair, PeerId};
use crate::pubsub::{FloodSub, Output};
use crate::sim::{ConfigError, EventQueue, RngStreams, ScenarioConfig, SimTime};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot set up the mesh: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Forward only to neighbors that announced the topic.
    pub strict_floodsub: bool,
}

/// Counters collected along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunCounters {
    /// When the sender's connection first became ready.
    pub connected_at_ms: Option<f64>,
    pub connections: u32,
    pub probes_sent: u32,
    pub probes_answered: u32,
    pub mesh_sends_failed: u32,
    pub bridge_errors: u32,
    pub pubsub_transmissions: u64,
    pub events: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: RunReport,
    pub breakdown: Vec<PacketBreakdown>,
    pub counters: RunCounters,
}

#[derive(Debug)]
enum Ev {
    Mesh(MeshEvent),
    HostTimer { node: usize, epoch: u64, timer: HostTimer },
    SerialWrite { node: usize, epoch: u64 },
    Publish { index: u32 },
    StartFallback,
    Churn { node: usize, online: bool },
}

impl From<MeshEvent> for Ev {
    fn from(e: MeshEvent) -> Self {
        Ev::Mesh(e)
    }
}

struct Node {
    addr: MeshAddress,
    host: Host,
    pubsub: FloodSub,
    serial_out: SegmentQueue,
    inbound: Inbound,
    msg_ids: MsgIdAllocator,
    online: bool,
    /// Bumped on every departure and return; stale events are ignored.
    epoch: u64,
    write_scheduled: bool,
}

#[derive(Debug, Clone, Default)]
struct Trace {
    sent: Option<SimTime>,
    handed: Option<SimTime>,
    written: Option<SimTime>,
    arrived: Option<(SimTime, Duration)>,
    received: Option<SimTime>,
}

struct World {
    q: EventQueue<Ev>,
    mesh: MeshNetwork,
    nodes: Vec<Node>,
    sender: usize,
    receiver: usize,
    topic: String,
    packet_count: u32,
    interval: Duration,
    message_size: usize,
    strict: bool,
    started: Option<SimTime>,
    traces: Vec<Trace>,
    counters: RunCounters,
}

const SENDER: usize = 0;
const RECEIVER: usize = 1;

pub fn run_experiment(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    if cfg.message_size_bytes < 4 {
        return Err(ConfigError::Invalid("message_size_bytes must be at least 4".into()).into());
    }
    if cfg.packet_count == 0 {
        return Err(ConfigError::Invalid("packet_count must be positive".into()).into());
    }
    cfg.host.validate().map_err(ConfigError::Invalid)?;
    let names = [&cfg.experiment.sender, &cfg.experiment.receiver];
    if let Some(c) = cfg.churn.iter().find(|c| !names.contains(&&c.node)) {
        return Err(ConfigError::Invalid(format!("churn node {} takes no part in the experiment", c.node)).into());
    }

    let streams = RngStreams::new(cfg.seed);
    let mut mesh = MeshNetwork::new(cfg.mesh.clone(), cfg.topology(), cfg.seed);
    let mut host_cfg = cfg.host.clone();
    host_cfg.keep_alive_s = cfg.keep_alive_s;
    let mut nodes = Vec::new();
    for name in names {
        let spec = cfg.node(name).expect("validated");
        let addr = MeshAddress(spec.unicast);
        mesh.provision(addr, spec.groups.iter().map(|g| MeshAddress(*g)))
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        let mut rng = streams.host(spec.unicast);
        let keypair = Keypair::generate(&mut rng);
        let host = Host::new(keypair, addr, host_cfg.clone(), rng);
        let pubsub = FloodSub::new(host.peer_id().clone());
        nodes.push(Node {
            addr,
            host,
            pubsub,
            serial_out: SegmentQueue::new(cfg.bridge.inter_segment_delay()),
            inbound: Inbound::new(cfg.bridge.reassembly_timeout()),
            msg_ids: MsgIdAllocator::default(),
            online: true,
            epoch: 0,
            write_scheduled: false,
        });
    }

    let mut w = World {
        q: EventQueue::new(),
        mesh,
        nodes,
        sender: SENDER,
        receiver: RECEIVER,
        topic: cfg.topic.clone(),
        packet_count: cfg.packet_count,
        interval: Duration::from_secs_f64(cfg.send_interval_s),
        message_size: cfg.message_size_bytes,
        strict: opts.strict_floodsub,
        started: None,
        traces: vec![Trace::default(); cfg.packet_count as usize],
        counters: RunCounters::default(),
    };
    for c in &cfg.churn {
        let node = if c.node == cfg.experiment.sender { SENDER } else { RECEIVER };
        if let Some(t) = c.leave_at_s {
            w.q.schedule(SimTime::from_secs_f64(t), Ev::Churn { node, online: false }).expect("future");
        }
        if let Some(t) = c.join_at_s {
            w.q.schedule(SimTime::from_secs_f64(t), Ev::Churn { node, online: true }).expect("future");
        }
    }
    let fallback = Duration::from_secs_f64(host_cfg.connect_timeout_s * host_cfg.connect_attempts as f64);
    w.q.schedule(SimTime::ZERO + fallback, Ev::StartFallback).expect("future");
    w.nodes[RECEIVER].pubsub.subscribe(&cfg.topic);
    for node in [SENDER, RECEIVER] {
        w.broadcast_presence(node);
    }

    let drain = Duration::from_secs_f64(cfg.drain_s);
    let span = w.interval * (cfg.packet_count - 1);
    while let Some(t) = w.q.peek_time() {
        if w.started.is_some_and(|s| t > s + span + drain) {
            break;
        }
        let ev = w.q.pop().expect("peeked");
        w.counters.events += 1;
        w.handle(ev.action);
    }
    w.counters.pubsub_transmissions = w.nodes.iter().map(|n| n.pubsub.transmissions()).sum();
    Ok(w.finish())
}

fn ms(t: SimTime) -> f64 {
    t.as_millis_f64()
}

fn dur_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl World {
    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Mesh(e) => {
                let outs = self.mesh.handle(&mut self.q, e);
                for o in outs {
                    self.on_mesh_output(o);
                }
            }
            Ev::HostTimer { node, epoch, timer } => {
                if self.live(node, epoch) {
                    let now = self.now();
                    let outs = self.nodes[node].host.on_timer(timer, now);
                    self.apply_host(node, outs);
                }
            }
            Ev::SerialWrite { node, epoch } => {
                if self.live(node, epoch) {
                    self.serial_write(node);
                }
            }
            Ev::Publish { index } => self.publish(index),
            Ev::StartFallback => {
                if self.started.is_none() {
                    self.start_publishing();
                }
            }
            Ev::Churn { node, online } => self.churn(node, online),
        }
    }

    fn live(&self, node: usize, epoch: u64) -> bool {
        let n = &self.nodes[node];
        n.online && n.epoch == epoch
    }

    fn node_at(&self, addr: MeshAddress) -> Option<usize> {
        self.nodes.iter().position(|n| n.addr == addr)
    }

    fn packet(tag: Option<u64>) -> Option<usize> {
        tag.map(|t| t as usize)
    }

    fn broadcast_presence(&mut self, node: usize) {
        let n = &self.nodes[node];
        let id = n.host.peer_id().as_str().as_bytes().to_vec();
        let _ = self.mesh.broadcast_presence(&mut self.q, n.addr, &id);
    }

    fn apply_host(&mut self, node: usize, outs: Vec<HostOutput>) {
        let now = self.now();
        for o in outs {
            match o {
                HostOutput::Transmit { to, payload, tag } => {
                    if let Some(i) = Self::packet(tag) {
                        self.traces[i].handed.get_or_insert(now);
                    }
                    let n = &mut self.nodes[node];
                    let msg_id = n.msg_ids.next_id();
                    match encode_message(&payload, DeviceAddress::from_mesh(to.0), msg_id) {
                        Ok(frames) => n.serial_out.enqueue(&frames, tag, now),
                        Err(_) => self.counters.bridge_errors += 1,
                    }
                    self.schedule_write(node);
                }
                HostOutput::Timer { at, timer } => {
                    let epoch = self.nodes[node].epoch;
                    self.q.schedule(at.max(now), Ev::HostTimer { node, epoch, timer }).expect("future");
                }
                HostOutput::Event(e) => self.on_host_event(node, e),
            }
        }
    }

    fn on_host_event(&mut self, node: usize, e: HostEvent) {
        let now = self.now();
        match e {
            HostEvent::PeerDiscovered { peer, new, .. } => {
                // a presence broadcast from a peer we are connected to
                // means it restarted
                let stale = self.nodes[node].host.is_connected(&peer);
                if stale {
                    let outs = self.nodes[node].host.disconnect(&peer);
                    self.nodes[node].pubsub.remove_neighbor(&peer);
                    self.apply_host(node, outs);
                }
                if new || stale {
                    self.broadcast_presence(node);
                }
                if node == self.sender {
                    self.dial(&peer);
                }
            }
            HostEvent::Connected { peer, .. } => {
                if node == self.sender {
                    self.counters.connections += 1;
                    self.counters.connected_at_ms.get_or_insert(ms(now));
                }
                let outs = self.nodes[node].pubsub.add_neighbor(peer);
                self.route_pubsub(node, outs, None);
                self.maybe_start();
            }
            HostEvent::Data { peer, data, .. } => {
                let outs = self.nodes[node].pubsub.on_bytes(&peer, &data, now);
                match outs {
                    Ok(outs) => self.route_pubsub(node, outs, None),
                    Err(_) => self.counters.bridge_errors += 1,
                }
                self.maybe_start();
            }
            HostEvent::Disconnected { peer, .. } => {
                self.nodes[node].pubsub.remove_neighbor(&peer);
                if node == self.sender {
                    self.dial(&peer);
                }
            }
            HostEvent::ProbeSent { .. } => self.counters.probes_sent += 1,
            HostEvent::ProbeAnswered { .. } => self.counters.probes_answered += 1,
            HostEvent::ConnectFailed { .. } | HostEvent::StreamOpened { .. } => {}
        }
    }

    fn dial(&mut self, peer: &PeerId) {
        let now = self.now();
        if let Ok(outs) = self.nodes[self.sender].host.connect(peer, now) {
            self.apply_host(self.sender, outs);
        }
    }

    fn maybe_start(&mut self) {
        if self.started.is_some() {
            return;
        }
        let s = &self.nodes[self.sender];
        let receiver = self.nodes[self.receiver].host.peer_id();
        if !s.host.is_connected(receiver) {
            return;
        }
        let subscribed = s.pubsub.neighbor_topics(receiver).is_some_and(|t| t.contains(&self.topic));
        if !self.strict || subscribed {
            self.start_publishing();
        }
    }

    fn start_publishing(&mut self) {
        let now = self.now();
        self.started = Some(now);
        self.q.schedule(now, Ev::Publish { index: 0 }).expect("now");
    }

    fn payload(&self, index: u32) -> Vec<u8> {
        let mut p = index.to_be_bytes().to_vec();
        p.extend((4..self.message_size).map(|j| (index as usize * 31 + j) as u8));
        p
    }

    fn publish(&mut self, index: u32) {
        let now = self.now();
        let start = self.started.expect("publishing started");
        if index + 1 < self.packet_count {
            let next = start + self.interval * (index + 1);
            self.q.schedule(next, Ev::Publish { index: index + 1 }).expect("future");
        }
        self.traces[index as usize].sent = Some(now);
        if !self.nodes[self.sender].online {
            return;
        }
        let payload = self.payload(index);
        let topic = self.topic.clone();
        let (_, outs) = self.nodes[self.sender].pubsub.publish(&topic, payload, now);
        self.route_pubsub(self.sender, outs, Some(index as u64));
    }

    fn route_pubsub(&mut self, node: usize, outs: Vec<Output>, tag: Option<u64>) {
        let now = self.now();
        for o in outs {
            match o {
                Output::Send { to, bytes } => {
                    if let Ok(outs) = self.nodes[node].host.send(&to, &bytes, tag, now) {
                        self.apply_host(node, outs);
                    }
                }
                Output::Deliver(msg) => {
                    if node != self.receiver || msg.topic != self.topic || msg.payload.len() < 4 {
                        continue;
                    }
                    let index = u32::from_be_bytes(msg.payload[..4].try_into().unwrap()) as usize;
                    if let Some(t) = self.traces.get_mut(index) {
                        t.received.get_or_insert(now);
                    }
                }
            }
        }
    }

    fn schedule_write(&mut self, node: usize) {
        let now = self.now();
        let n = &mut self.nodes[node];
        if n.write_scheduled {
            return;
        }
        if let Some(at) = n.serial_out.next_write_at() {
            n.write_scheduled = true;
            let epoch = n.epoch;
            self.q.schedule(at.max(now), Ev::SerialWrite { node, epoch }).expect("future");
        }
    }

    /// One frame leaves the host's serial port and the mesh firmware
    /// queues it as a mesh message.
    fn serial_write(&mut self, node: usize) {
        let now = self.now();
        self.nodes[node].write_scheduled = false;
        if let Some(f) = self.nodes[node].serial_out.pop_due(now) {
            let mut dst = [0u8; DST_LEN];
            dst.copy_from_slice(&f.bytes[HEADER_LEN..HEADER_LEN + DST_LEN]);
            let dst = MeshAddress(DeviceAddress(dst).mesh());
            let src = self.nodes[node].addr;
            if f.is_final {
                if let Some(i) = Self::packet(f.tag) {
                    self.traces[i].written = Some(now);
                }
            }
            let _ = self.mesh.mesh_send(&mut self.q, src, dst, f.bytes, PayloadKind::Bridge, f.tag);
        }
        self.schedule_write(node);
    }

    fn on_mesh_output(&mut self, o: MeshOutput) {
        let now = self.now();
        match o {
            MeshOutput::Completed(c) => {
                if c.outcome == SendOutcome::Failed {
                    self.counters.mesh_sends_failed += 1;
                }
            }
            MeshOutput::Delivered(d) => {
                let Some(node) = self.node_at(d.to) else { return };
                if !self.nodes[node].online {
                    return;
                }
                let msg = &d.message;
                match msg.kind {
                    PayloadKind::Presence => {
                        let outs = self.nodes[node].host.on_presence(msg.origin, &msg.payload, now);
                        self.apply_host(node, outs);
                    }
                    PayloadKind::Bridge => {
                        let mut bytes = msg.payload.clone();
                        if bytes.len() < HEADER_LEN + DST_LEN {
                            return;
                        }
                        bytes[HEADER_LEN..HEADER_LEN + DST_LEN]
                            .copy_from_slice(&DeviceAddress::from_mesh(msg.origin.0).0);
                        let events = self.nodes[node].inbound.on_bytes(&bytes, now);
                        for ev in events {
                            match ev {
                                InboundEvent::Delivered { source, payload, .. } => {
                                    if let Some(i) = Self::packet(msg.tag) {
                                        if let Some(t) = self.traces.get_mut(i) {
                                            t.arrived = Some((now, d.link_latency));
                                        }
                                    }
                                    let from = MeshAddress(source.mesh());
                                    let outs = self.nodes[node].host.on_transport(from, payload.as_bytes(), now);
                                    self.apply_host(node, outs);
                                }
                                InboundEvent::Error(_) => self.counters.bridge_errors += 1,
                            }
                        }
                    }
                }
            }
        }
    }

    fn churn(&mut self, node: usize, online: bool) {
        let n = &mut self.nodes[node];
        if n.online == online {
            return;
        }
        let _ = self.mesh.set_online(n.addr, online);
        n.online = online;
        n.epoch += 1;
        n.write_scheduled = false;
        if online {
            self.broadcast_presence(node);
        } else {
            n.host.reset();
            n.pubsub.clear_neighbors();
            n.serial_out.clear();
            n.inbound.reset();
        }
    }

    fn finish(self) -> ExperimentResult {
        let mut records = Vec::with_capacity(self.traces.len());
        let mut breakdown = Vec::new();
        for (i, t) in self.traces.iter().enumerate() {
            let Some(sent) = t.sent else { continue };
            let index = i as u32;
            records.push(PacketRecord { index, sent_ms: ms(sent), received_ms: t.received.map(ms) });
            if let (Some(handed), Some(written), Some((arrived, link)), Some(_)) =
                (t.handed, t.written, t.arrived, t.received)
            {
                breakdown.push(PacketBreakdown {
                    index,
                    hold_ms: dur_ms(handed.saturating_since(sent)),
                    bridge_ms: dur_ms(written.saturating_since(handed)),
                    mesh_ms: dur_ms(arrived.saturating_since(written)) - dur_ms(link),
                    link_ms: dur_ms(link),
                });
            }
        }
        let report = report_stats(records).expect("at least one packet is published");
        ExperimentResult { report, breakdown, counters: self.counters }
    }
}
