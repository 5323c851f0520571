//! Seed fan-out.
//!
//! Every random decision in the pipeline draws from a [`ChaCha8Rng`] whose seed
//! is derived from a master seed and a path of labelled components, e.g.
//! `(master, "fold", 2, "step1")`. Derivation is a SplitMix64 chain, so sub-seeds
//! are stable across platforms and independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a sub-seed from `master` and numeric components.
pub fn derive(master: u64, components: &[u64]) -> u64 {
    components
        .iter()
        .fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// Derives a sub-seed from `master`, a component label and numeric components.
pub fn derive_labeled(master: u64, label: &str, components: &[u64]) -> u64 {
    derive(splitmix64(master) ^ fnv1a(label), components)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(master: u64, label: &str, components: &[u64]) -> ChaCha8Rng {
    rng(derive_labeled(master, label, components))
}
