//! Seeded randomness. Every weight init, shuffle and sample in the crate draws
//! from [`Prng`], a ChaCha stream cipher with 8 rounds keyed by a 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from `seed` for a named purpose, so adding a
/// consumer does not shift the draws of another.
pub fn stream(seed: u64, purpose: u64) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Stream identifiers passed to [`stream`].
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAUC: u64 = 3;
    pub const DATA: u64 = 4;
    pub const FUSION_INIT: u64 = 5;
}
