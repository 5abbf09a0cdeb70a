//! Seed derivation. Every random stream in the crate is keyed from a base
//! seed plus a small tuple of stream identifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(base: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix64(base), |acc, &s| mix64(acc ^ mix64(s)))
}

pub fn rng(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream))
}

// Stream tags.
pub const INIT: u64 = 1;
pub const EPISODE: u64 = 2;
pub const NOISE: u64 = 3;
pub const AUGMENT: u64 = 4;
pub const EVAL: u64 = 5;
pub const TEMPLATE: u64 = 6;
pub const SAMPLE: u64 = 7;
