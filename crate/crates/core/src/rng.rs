//! Keyed random streams.
//!
//! Every stochastic step (donor draws, vetting rollouts, classification,
//! training rollouts) pulls from its own ChaCha stream whose seed is a hash of
//! the global seed and a list of labels. Streams therefore do not depend on
//! the order in which samples are visited or on how work is split across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives an independent stream from `seed` and `labels`.
pub fn stream(seed: u64, labels: &[&str]) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        // length prefix keeps ("ab","c") distinct from ("a","bc")
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
