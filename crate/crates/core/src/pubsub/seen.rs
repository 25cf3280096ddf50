use std::num::NonZeroUsize;
use std::time::Duration;

use lru::LruCache;

use crate::p2p::PeerId;
use crate::sim::SimTime;

pub const DEFAULT_TTL: Duration = Duration::from_secs(120);
pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy)]
struct Entry {
    inserted: SimTime,
    forwards: u64,
}

/// Recently seen (source, seqno) pairs. When full, expired entries go
/// first and then the least recently used one. Each entry also counts
/// how many times this node forwarded that message.
#[derive(Debug)]
pub struct SeenCache {
    ttl: Duration,
    entries: LruCache<(PeerId, u64), Entry>,
}

impl Default for SeenCache {
    fn default() -> Self {
        SeenCache::new(DEFAULT_TTL, DEFAULT_CAPACITY)
    }
}

impl SeenCache {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        SeenCache { ttl, entries: LruCache::new(cap) }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn capacity(&self) -> usize {
        self.entries.cap().get()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn expired(&self, e: &Entry, now: SimTime) -> bool {
        now.saturating_since(e.inserted) >= self.ttl
    }

    /// Whether the key is cached and unexpired. Counts as a use.
    pub fn contains(&mut self, key: &(PeerId, u64), now: SimTime) -> bool {
        let ttl = self.ttl;
        match self.entries.get(key) {
            Some(e) if now.saturating_since(e.inserted) < ttl => true,
            Some(_) => {
                self.entries.pop(key);
                false
            }
            None => false,
        }
    }

    /// Inserts the key. Returns false if it was already present and unexpired.
    pub fn insert(&mut self, key: (PeerId, u64), now: SimTime) -> bool {
        if self.contains(&key, now) {
            return false;
        }
        if self.entries.len() == self.capacity() {
            let stale: Vec<_> =
                self.entries.iter().filter(|(_, e)| self.expired(e, now)).map(|(k, _)| k.clone()).collect();
            for k in stale {
                self.entries.pop(&k);
            }
        }
        self.entries.push(key, Entry { inserted: now, forwards: 0 });
        true
    }

    pub(crate) fn add_forwards(&mut self, key: &(PeerId, u64), n: u64) {
        if let Some(e) = self.entries.peek_mut(key) {
            e.forwards += n;
        }
    }

    /// Forwards recorded for a cached message, without counting as a use.
    pub fn forwards(&self, key: &(PeerId, u64)) -> Option<u64> {
        self.entries.peek(key).map(|e| e.forwards)
    }
}
