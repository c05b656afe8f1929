//! Deterministic, labelled random streams.
//!
//! Every consumer of randomness asks for its own stream by label, so adding
//! draws in one place never shifts the numbers another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type CardRng = ChaCha8Rng;

/// Stream for `(seed, label)`. Identical inputs give identical streams.
pub fn seeded_rng(seed: u64, stream_label: &str) -> CardRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream_label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
