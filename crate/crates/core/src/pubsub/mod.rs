//! FloodSub: every node relays each new message to all of its neighbors
//! and drops copies it has already seen. Subscriptions are announced to
//! direct neighbors only. The router is sans-IO; callers move the
//! returned [`Output::Send`] bytes over the "/floodsub/1.0.0" stream.

mod seen;
mod wire;

use std::collections::{BTreeMap, BTreeSet};

pub use seen::{SeenCache, DEFAULT_CAPACITY, DEFAULT_TTL};
pub use wire::{decode_records, PubSubMessage, Record, WireError};

use crate::p2p::PeerId;
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    /// Stream bytes for a neighbor.
    Send { to: PeerId, bytes: Vec<u8> },
    /// A message on a topic this node subscribes to.
    Deliver(PubSubMessage),
}

#[derive(Debug, Default, Clone)]
struct Neighbor {
    topics: BTreeSet<String>,
    inbox: Vec<u8>,
}

#[derive(Debug)]
pub struct FloodSub {
    local: PeerId,
    strict: bool,
    subscriptions: BTreeSet<String>,
    neighbors: BTreeMap<PeerId, Neighbor>,
    seen: SeenCache,
    next_seqno: u64,
    transmissions: u64,
}

impl FloodSub {
    pub fn new(local: PeerId) -> Self {
        Self::with_cache(local, SeenCache::default())
    }

    pub fn with_cache(local: PeerId, seen: SeenCache) -> Self {
        FloodSub {
            local,
            strict: false,
            subscriptions: BTreeSet::new(),
            neighbors: BTreeMap::new(),
            seen,
            next_seqno: 1,
            transmissions: 0,
        }
    }

    /// Strict mode forwards only to neighbors that announced the topic.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn local(&self) -> &PeerId {
        &self.local
    }

    pub fn is_subscribed(&self, topic: &str) -> bool {
        self.subscriptions.contains(topic)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &PeerId> {
        self.neighbors.keys()
    }

    /// Topics a neighbor has announced.
    pub fn neighbor_topics(&self, peer: &PeerId) -> Option<&BTreeSet<String>> {
        self.neighbors.get(peer).map(|n| &n.topics)
    }

    /// Records sent by this node, announcements excluded.
    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }

    /// How many times this node sent the message (source, seqno), while
    /// it is still cached.
    pub fn forwards_of(&self, source: &PeerId, seqno: u64) -> Option<u64> {
        self.seen.forwards(&(source.clone(), seqno))
    }

    fn announce_all(&self, rec: Record) -> Vec<Output> {
        let bytes = rec.encode();
        self.neighbors.keys().map(|p| Output::Send { to: p.clone(), bytes: bytes.clone() }).collect()
    }

    pub fn subscribe(&mut self, topic: &str) -> Vec<Output> {
        if !self.subscriptions.insert(topic.to_string()) {
            return Vec::new();
        }
        self.announce_all(Record::Subscribe(topic.to_string()))
    }

    pub fn unsubscribe(&mut self, topic: &str) -> Vec<Output> {
        if !self.subscriptions.remove(topic) {
            return Vec::new();
        }
        self.announce_all(Record::Unsubscribe(topic.to_string()))
    }

    /// A stream to `peer` is ready. Sends it our subscriptions.
    pub fn add_neighbor(&mut self, peer: PeerId) -> Vec<Output> {
        let bytes: Vec<u8> = self.subscriptions.iter().flat_map(|t| Record::Subscribe(t.clone()).encode()).collect();
        self.neighbors.insert(peer.clone(), Neighbor::default());
        if bytes.is_empty() {
            Vec::new()
        } else {
            vec![Output::Send { to: peer, bytes }]
        }
    }

    pub fn remove_neighbor(&mut self, peer: &PeerId) {
        self.neighbors.remove(peer);
    }

    /// Forgets every neighbor, as after a restart. Subscriptions, the seen
    /// cache and the sequence counter are kept so that new messages are not
    /// mistaken for old ones.
    pub fn clear_neighbors(&mut self) {
        self.neighbors.clear();
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, now: SimTime) -> (PubSubMessage, Vec<Output>) {
        let msg =
            PubSubMessage { source: self.local.clone(), seqno: self.next_seqno, topic: topic.to_string(), payload };
        self.next_seqno += 1;
        self.seen.insert(msg.key(), now);
        let mut out = Vec::new();
        if self.is_subscribed(topic) {
            out.push(Output::Deliver(msg.clone()));
        }
        self.forward(&msg, None, &mut out);
        (msg, out)
    }

    /// Bytes arrived on the floodsub stream from `from`. Unknown senders
    /// are added as neighbors.
    pub fn on_bytes(&mut self, from: &PeerId, data: &[u8], now: SimTime) -> Result<Vec<Output>, WireError> {
        let n = self.neighbors.entry(from.clone()).or_default();
        n.inbox.extend_from_slice(data);
        let records = match decode_records(&mut n.inbox) {
            Ok(r) => r,
            Err(e) => {
                n.inbox.clear();
                return Err(e);
            }
        };
        let mut out = Vec::new();
        for rec in records {
            out.extend(self.on_record(from, rec, now));
        }
        Ok(out)
    }

    pub fn on_record(&mut self, from: &PeerId, rec: Record, now: SimTime) -> Vec<Output> {
        match rec {
            Record::Subscribe(t) => {
                self.neighbors.entry(from.clone()).or_default().topics.insert(t);
                Vec::new()
            }
            Record::Unsubscribe(t) => {
                if let Some(n) = self.neighbors.get_mut(from) {
                    n.topics.remove(&t);
                }
                Vec::new()
            }
            Record::Message(msg) => self.on_message(from, msg, now),
        }
    }

    pub fn on_message(&mut self, from: &PeerId, msg: PubSubMessage, now: SimTime) -> Vec<Output> {
        if msg.source == self.local || !self.seen.insert(msg.key(), now) {
            return Vec::new();
        }
        let mut out = Vec::new();
        if self.is_subscribed(&msg.topic) {
            out.push(Output::Deliver(msg.clone()));
        }
        self.forward(&msg, Some(from), &mut out);
        out
    }

    fn forward(&mut self, msg: &PubSubMessage, except: Option<&PeerId>, out: &mut Vec<Output>) {
        let bytes = Record::Message(msg.clone()).encode();
        let mut n = 0;
        for (peer, nb) in &self.neighbors {
            if Some(peer) == except || *peer == msg.source {
                continue;
            }
            if self.strict && !nb.topics.contains(&msg.topic) {
                continue;
            }
            out.push(Output::Send { to: peer.clone(), bytes: bytes.clone() });
            n += 1;
        }
        self.transmissions += n;
        self.seen.add_forwards(&msg.key(), n);
    }
}
