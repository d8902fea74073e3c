//! Stable seed derivation and artifact hashing.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream whose seed
//! is derived from a textual scope string, so results are reproducible across
//! runs and platforms and independent of execution order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Derive a ChaCha8 RNG from a master seed and a scope label.
pub fn rng_for(seed: u64, scope: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(scope.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Hex SHA-256 of a byte slice.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex_string(&digest)
}

/// Hex SHA-256 of a file's contents.
pub fn hash_file(path: impl AsRef<Path>) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hash_bytes(&bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_scope_same_stream() {
        let mut a = rng_for(7, "unit/test");
        let mut b = rng_for(7, "unit/test");
        for _ in 0..8 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_scope_different_stream() {
        let mut a = rng_for(7, "unit/test");
        let mut b = rng_for(7, "unit/test2");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(hash_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
