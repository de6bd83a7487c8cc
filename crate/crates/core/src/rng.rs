//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! experiment seed, a purpose label and optional indices (task, round,
//! client). Identical seeds and fork order reproduce identical streams, and
//! streams for different purposes never interleave.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The pseudo-random stream type used throughout the simulator.
pub type Stream = ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from (seed, label, indices). Stable across platforms.
pub fn derive(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    for idx in indices {
        h = fnv1a(h, &[0xff]);
        h = fnv1a(h, &idx.to_le_bytes());
    }
    splitmix(h)
}

/// Forks a fresh deterministic stream for one purpose.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> Stream {
    ChaCha12Rng::seed_from_u64(derive(seed, label, indices))
}
