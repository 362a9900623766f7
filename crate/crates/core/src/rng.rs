//! Seed derivation. Every random stream in an experiment is a pure
//! function of (experiment seed, purpose tag), so parallel or reordered
//! execution can never change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a deterministic rng for (seed, tag).
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let t = fnv1a(tag.as_bytes());
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&t.to_le_bytes());
    key[16..24].copy_from_slice(&seed.wrapping_mul(0x9e3779b97f4a7c15).to_le_bytes());
    key[24..32].copy_from_slice(&t.wrapping_mul(0xff51afd7ed558ccd).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derive a sub-seed for (seed, tag), for nesting.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a(tag.as_bytes()).rotate_left(17)
}
