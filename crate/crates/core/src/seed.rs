//! Seed derivation.
//!
//! Every random stream in the crate is seeded from a single master seed.
//! A sub-seed is `splitmix64(master ^ fnv1a(tag) ^ splitmix64(index))`, so
//! streams for different stages (`tag`) and different items inside a stage
//! (`index`) are decorrelated and independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives the sub-seed for item `index` of stage `tag`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a(tag) ^ splitmix64(index))
}

/// The RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
