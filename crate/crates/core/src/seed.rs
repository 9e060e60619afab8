//! Deterministic seed fan-out.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded with
//! `derive_seed(parent, label)`: the first eight bytes (little-endian) of
//! `SHA-256(parent.to_le_bytes() || label)`. Labels are path-like strings
//! (`"align/image"`, `"latent/17"`), so a child seed can itself be a parent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_for(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}
