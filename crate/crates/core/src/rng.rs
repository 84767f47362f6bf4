//! Seed derivation for independent, reproducible rng streams.
//!
//! Every parallel unit of work (evaluation episode, cache entry, worker
//! shard) owns its own ChaCha stream derived from a master seed plus a
//! stable label, so results do not depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic rng used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Rng seeded directly from a u64.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `(seed, label, index)`.
///
/// The derivation hashes all inputs, so streams for different labels or
/// indices are unrelated even when seeds are small consecutive integers.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
