//! Seeded random streams.
//!
//! Every consumer of randomness asks for a substream keyed by
//! `(master seed, domain, index)`, so results never depend on the order in
//! which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Substream domains.
pub mod domain {
    pub const RESTART: u64 = 1;
    pub const POSTERIOR: u64 = 2;
    pub const DIRICHLET: u64 = 3;
    pub const DELTA: u64 = 4;
    pub const REPLICATE: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const TRUTH: u64 = 7;
    pub const FIT: u64 = 8;
    pub const SCENARIO: u64 = 9;
}

pub fn substream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mixed = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}

/// Index for a per-arm, per-replicate stream.
pub fn arm_index(arm: usize, b: usize) -> u64 {
    ((arm as u64) << 40) | b as u64
}
