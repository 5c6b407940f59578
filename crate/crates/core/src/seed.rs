//! Deterministic seed derivation for per-item RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of a stream rooted at `root`. Independent of the
/// order in which items are produced.
pub fn derive(root: u64, index: u64) -> u64 {
    mix(mix(root) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Seed derived from a root and a textual label (e.g. "column-perm").
pub fn derive_named(root: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix(root), |acc, b| mix(acc ^ b as u64))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
