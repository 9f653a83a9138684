//! Named random substreams derived from a single root seed.
//!
//! Every phase draws from its own stream (`init`, `batching`, `masks`,
//! `noise`, ...), so re-running one phase reproduces it without replaying
//! the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from `root` and a stream name.
pub fn derive(root: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stream.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn rng(root: u64, stream: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
