//! Stable sub-seed derivation.
//!
//! Every random stream in the pipeline is keyed by a tuple of integers
//! (global seed, iteration, receiver, ray, stage, ...) mixed with SplitMix64
//! finalizers. The mapping is fixed across platforms and releases, so a run
//! is reproducible from the global seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C908_u64;
    for (i, &p) in parts.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(i as u64)));
    }
    h
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags used as the second word of derived seeds.
pub mod stream {
    pub const BATCH: u64 = 1;
    pub const COARSE: u64 = 2;
    pub const FINE: u64 = 3;
    pub const RECEIVER: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const EVAL: u64 = 7;
}
