//! Deterministic per-purpose random streams.
//!
//! Every stochastic choice (init, shuffling, sampling, reseeding) draws
//! from a stream derived from `(seed, purpose, step)`, so a resumed run
//! replays the exact randomness of the original.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stream for a named purpose at a given step.
pub fn stream(seed: u64, purpose: &str, step: u64) -> ChaCha8Rng {
    let mixed = splitmix(seed ^ splitmix(fnv1a(purpose)) ^ splitmix(step.wrapping_mul(0x2545f491)));
    ChaCha8Rng::seed_from_u64(mixed)
}
