//! Per-component seed derivation from one root seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `sha256(root_le || name)`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}
