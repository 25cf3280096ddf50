use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Splits one scenario seed into independent per-node streams.
///
/// Stream ids are stable (derived from node addresses), so adding a node
/// leaves every other node's draws unchanged.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

/// Offset between the radio stream of a node and its key-material stream.
const KEY_STREAM_OFFSET: u64 = 1 << 32;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Radio draws (loss, jitter) for the node at `addr`.
    pub fn radio(&self, addr: u16) -> ChaCha8Rng {
        self.stream(addr as u64)
    }

    /// Key generation and other host-side randomness for `addr`.
    pub fn host(&self, addr: u16) -> ChaCha8Rng {
        self.stream(KEY_STREAM_OFFSET + addr as u64)
    }
}
