//! Seed derivation. All randomness in the crate flows from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Platform-independent sub-seed for `(seed, key)`.
pub fn keyed_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn keyed_rng(seed: u64, key: &str) -> Rng {
    rng(keyed_seed(seed, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_seeds_separate_keys_and_seeds() {
        assert_eq!(keyed_seed(1, "a"), keyed_seed(1, "a"));
        assert_ne!(keyed_seed(1, "a"), keyed_seed(1, "b"));
        assert_ne!(keyed_seed(1, "a"), keyed_seed(2, "a"));
        assert_ne!(keyed_seed(1, "ab"), keyed_seed(1, "a"));
    }
}
