//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream whose seed is
//! derived from a parent seed and a path of integer tags. Nothing in the
//! crate draws from a shared generator, so results never depend on
//! evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, tags: &[u64]) -> Rng {
    stream(derive_seed(seed, tags))
}

/// Tags used to separate independent streams hanging off one seed.
pub mod tag {
    pub const ENV: u64 = 1;
    pub const INIT: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const GOAL: u64 = 5;
    pub const ES_NOISE: u64 = 6;
    pub const CANDIDATE: u64 = 7;
    pub const ROLLOUT: u64 = 8;
    pub const ADVERSARY: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const EXPLORE: u64 = 11;
    pub const ORACLE: u64 = 12;
}
