//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed by
//! the master seed and a tuple of integers naming the stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and an ordered list of stream labels.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels, so call sites read as `derive(seed, &[stream::TRAIN, round, ..])`.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const PUBLIC: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const WIRE: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const META: u64 = 7;
    pub const PROXY: u64 = 8;
    pub const TEST: u64 = 9;
    pub const DISTILL: u64 = 10;
}
