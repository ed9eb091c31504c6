//! Sub-seed derivation. Every random stream in a run is derived from one
//! master seed plus a label and a counter, so streams are independent of
//! the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, label: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(counter.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn derive_rng(seed: u64, label: &str, counter: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label, counter))
}
