//! Deterministic derivation of RNG sub-streams from a single run seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; mixes a seed with a stream label.
pub fn mix(seed: u64, label: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(label)
        .wrapping_add(0x243f6a8885a308d3);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn mix_str(seed: u64, label: &str) -> u64 {
    let mut acc = 0xcbf29ce484222325u64;
    for b in label.bytes() {
        acc = (acc ^ b as u64).wrapping_mul(0x100000001b3);
    }
    mix(seed, acc)
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_str(seed, label))
}

pub fn rng_for_index(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix_str(seed, label), index))
}
