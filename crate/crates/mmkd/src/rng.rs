//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate is a pure function of a base seed
//! plus a list of purpose tags, so any step of a run can be replayed (or
//! resumed) without carrying mutable RNG state around.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream from `(seed, tags...)`.
///
/// Tags are hashed, not concatenated, so `stream(s, &[1, 2])` and
/// `stream(s, &[12])` are unrelated.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable tag for a string label (used to key streams by purpose name).
pub fn tag(label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
