//! Deterministic RNG streams.
//!
//! Every randomness consumer derives its own ChaCha20 stream from the run
//! seed plus a list of string tags (phase, purpose, iteration, ...). Streams
//! are independent, so adding or removing one consumer (e.g. running
//! diagnostics mid-training) never shifts the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a deterministic RNG from the run seed and a tag path.
///
/// Tags are length-prefixed before hashing so that `["ab", "c"]` and
/// `["a", "bc"]` produce different streams.
pub fn derive_rng(seed: u64, tags: &[&str]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for tag in tags {
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Convenience for per-iteration streams: appends the iteration index as a
/// final tag.
pub fn derive_rng_at(seed: u64, tags: &[&str], iteration: u64) -> ChaCha20Rng {
    let it = iteration.to_string();
    let mut all: Vec<&str> = tags.to_vec();
    all.push(&it);
    derive_rng(seed, &all)
}
