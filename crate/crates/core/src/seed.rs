//! Seed derivation. Every random component draws from a generator whose seed
//! is a hash of the master seed and the component's name, so adding a
//! component never perturbs the streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// First eight bytes (little endian) of `SHA-256(master_le || name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn component_rng(master: u64, name: &str) -> Rng {
    rng_from_seed(derive_seed(master, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_stable_and_name_sensitive() {
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "data"));
        assert_ne!(derive_seed(7, "init"), derive_seed(8, "init"));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<u64> = component_rng(1, "x").random_iter().take(4).collect();
        let b: Vec<u64> = component_rng(1, "x").random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
