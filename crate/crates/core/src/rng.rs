//! Seeded random streams. Every randomized path draws from a ChaCha stream
//! derived from `(seed, id)`, so per-item results do not depend on the order
//! in which items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stable 64-bit id for a string key (e.g. a dataset entry id).
pub fn key_id(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn keyed_stream(seed: u64, key: &str) -> Rng {
    stream(seed, key_id(key))
}
