//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A derived seed is
//! the first eight bytes (little endian) of
//! `SHA-256(root_le || purpose || 0x00 || part_0_le || part_1_le || ...)`,
//! so streams depend only on what they are for, never on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, purpose: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Stable 64-bit id for a string key (e.g. a slide id).
pub fn key_id(key: &str) -> u64 {
    derive_seed(0, key, &[])
}

/// Counter-based ChaCha stream for a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used for per-pixel noise where a full stream per
/// pixel would be wasteful.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) from a hash value.
#[inline]
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
