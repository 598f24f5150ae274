//! Seed derivation and RNG construction.
//!
//! Every random draw in the crate comes from a ChaCha stream seeded by a
//! hash of (parent seed, stream tag, index). Derived seeds are independent
//! of evaluation order and parallelism degree, so reruns at any thread
//! count reproduce the same draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream tags keep independent consumers of one run seed apart.
pub mod stream {
    pub const DATA_GEN: u64 = 0x01;
    pub const TRAIN: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const CORRUPT: u64 = 0x04;
    pub const EVAL_POINT: u64 = 0x05;
    pub const INIT: u64 = 0x06;
}

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from (seed, stream tag, index).
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(tag)) ^ mix(index))
}

/// Counter-based generator for a derived seed.
pub fn rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// Generator directly from a raw seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
