//! Counter-based random streams.
//!
//! Every draw in training comes from a ChaCha stream whose key is a hash of
//! `(seed, outer iteration, trajectory index, purpose)`. Streams never depend
//! on how work is split across threads or on the order it runs in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type KeyedRng = ChaCha8Rng;

pub fn keyed_rng(seed: u64, outer: u64, traj: u64, purpose: &str) -> KeyedRng {
    let mut h = Sha256::new();
    h.update(b"wgflow.rng.v1");
    h.update(seed.to_le_bytes());
    h.update(outer.to_le_bytes());
    h.update(traj.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
