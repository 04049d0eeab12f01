//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A stream is named
//! by a short label (`"pretrain/init"`, `"search/scores"`, `"order/3"`, ...) and
//! its seed is the first 8 bytes, little-endian, of
//! `SHA-256(root.to_le_bytes() || label)`.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
