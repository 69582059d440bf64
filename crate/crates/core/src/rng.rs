//! Named, index-addressable random streams derived from one run seed.
//!
//! Every consumer (data synthesis, initialization, diffusion timesteps,
//! sampling) draws from its own stream, so adding or reordering work in one
//! place never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn child_seed(seed: u64, stream: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// A derived 64-bit seed, for handing a stream to code that seeds its own RNG.
pub fn seed_u64(seed: u64, stream: &str, index: u64) -> u64 {
    let b = child_seed(seed, stream, index);
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

pub fn child_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(child_seed(seed, stream, index))
}
