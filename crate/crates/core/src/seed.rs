//! Splits one master seed into independent named streams.
//!
//! Stream seed = first 8 bytes (little endian) of
//! `SHA-256("crlc-seed:" || name || ":" || master as u64 little endian)`.
//! Changing how one component consumes randomness never perturbs another.

use sha2::{Digest, Sha256};

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const AUGMENT: &str = "augment";
pub const BATCH: &str = "batch";
pub const BANK: &str = "bank";
pub const LABELS: &str = "labels";

pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"crlc-seed:");
    h.update(name.as_bytes());
    h.update(b":");
    h.update(master.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
