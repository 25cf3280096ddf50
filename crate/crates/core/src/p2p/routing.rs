use std::collections::BTreeMap;

use super::peer_id::PeerId;
use crate::mesh::MeshAddress;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub addr: MeshAddress,
    pub learned_at: SimTime,
}

/// Peer id to mesh client address, one address per peer. A newer
/// announcement replaces the old entry, including one that moves an
/// address to a different peer.
#[derive(Debug, Clone, Default)]
pub struct RoutingTable {
    entries: BTreeMap<PeerId, Route>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an announcement. Returns true if the peer was not known
    /// or had moved.
    pub fn learn(&mut self, peer: PeerId, addr: MeshAddress, now: SimTime) -> bool {
        self.entries.retain(|p, r| r.addr != addr || *p == peer);
        let prev = self.entries.insert(peer, Route { addr, learned_at: now });
        prev.is_none_or(|r| r.addr != addr)
    }

    pub fn lookup(&self, peer: &PeerId) -> Option<MeshAddress> {
        self.entries.get(peer).map(|r| r.addr)
    }

    pub fn route(&self, peer: &PeerId) -> Option<&Route> {
        self.entries.get(peer)
    }

    pub fn peer_at(&self, addr: MeshAddress) -> Option<&PeerId> {
        self.entries.iter().find(|(_, r)| r.addr == addr).map(|(p, _)| p)
    }

    pub fn forget(&mut self, peer: &PeerId) -> Option<Route> {
        self.entries.remove(peer)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PeerId, &Route)> {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::p2p::Keypair;

    fn peer(n: u8) -> PeerId {
        Keypair::from_bytes([n; 32]).peer_id()
    }

    #[test]
    fn learn_update_and_lookup() {
        let mut t = RoutingTable::new();
        assert!(t.learn(peer(1), MeshAddress(0x27), SimTime::ZERO));
        assert!(!t.learn(peer(1), MeshAddress(0x27), SimTime::from_millis(5)));
        assert_eq!(t.route(&peer(1)).unwrap().learned_at, SimTime::from_millis(5));
        assert!(t.learn(peer(1), MeshAddress(0x28), SimTime::from_millis(6)));
        assert_eq!(t.lookup(&peer(1)), Some(MeshAddress(0x28)));
        assert_eq!(t.len(), 1);
        // address reused by a new identity
        t.learn(peer(2), MeshAddress(0x28), SimTime::from_millis(7));
        assert_eq!(t.lookup(&peer(1)), None);
        assert_eq!(t.peer_at(MeshAddress(0x28)), Some(&peer(2)));
    }
}
