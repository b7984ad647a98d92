//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream selected by `(seed, key)`: the seed
//! picks the cipher key and `key` picks the 64-bit stream id. ChaCha is a
//! counter-based generator, so the n-th draw of a stream is a pure function of
//! `(seed, key, n)` and does not depend on which worker produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent seeds from tags.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed for a named sub-experiment (grid cell, cache node, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn stream(seed: u64, key: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

#[inline]
pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut StreamRng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        *v = scale * normal(rng);
    }
}
