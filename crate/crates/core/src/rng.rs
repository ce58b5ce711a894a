//! Deterministic RNG stream derivation.
//!
//! A master seed is split into independent substreams by mixing tag words
//! through SplitMix64, so per-epoch and per-sample streams do not depend on
//! execution order or parallelism.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of tag words.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = mix(master);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// A ChaCha stream for the given seed path.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
