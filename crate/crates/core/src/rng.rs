//! Named, independently seeded random substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Root of all randomness for one run. Each component asks for its own
/// substream by name, so re-seeding or reordering one component never
/// shifts another component's draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub const SPLIT: &'static str = "split";
    pub const SYNTHETIC: &'static str = "synthetic";
    pub const PAIRING: &'static str = "pairing";
    pub const INIT: &'static str = "init";
    pub const BATCHING: &'static str = "batching";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, name: &str) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    /// Substream indexed by name and an integer, e.g. one per preference head.
    pub fn indexed(&self, name: &str, index: usize) -> StreamRng {
        self.substream(&format!("{name}/{index}"))
    }
}
