//! Deterministic RNG streams.
//!
//! Every random draw in the toolkit comes from a stream derived from the run
//! seed plus a purpose tag (and optional ids), so sub-procedures stay
//! reproducible regardless of execution order or parallelism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step, used to fold tag components into one 64-bit state.
fn mix(mut h: u64, v: u64) -> u64 {
    h = h.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(v);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a), for tagging streams by name.
pub fn tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fold tags into a seed, producing a child seed for nested derivation.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut h = mix(0x6b616e7372, seed);
    for &t in tags {
        h = mix(h, t);
    }
    h
}

/// Seeded ChaCha stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
