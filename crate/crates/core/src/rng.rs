//! Seeded random streams. Every stochastic component draws from a ChaCha8
//! stream derived from a user seed and a fixed stream tag, so results are
//! reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `seed` with a stream tag (SplitMix64 finaliser).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags.
pub mod stream {
    pub const LEARNER_INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const PERTURB: u64 = 3;
    pub const OPTIMISER_INIT: u64 = 4;
    pub const FACTORS: u64 = 5;
    pub const DATA: u64 = 6;
}
