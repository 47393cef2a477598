//! Seed derivation.
//!
//! Every random consumer draws from its own ChaCha8 stream whose seed is a
//! hash of the parent seed and a label (and optionally an index). Streams are
//! therefore independent of how many other consumers exist:
//!
//! ```text
//! derive(seed, label)        = mix(seed ^ mix(fnv1a(label)))
//! derive_indexed(seed, l, i) = mix(derive(seed, l) ^ mix(i + 0x9E3779B97F4A7C15))
//! ```
//!
//! `mix` is the SplitMix64 finalizer and `fnv1a` the 64-bit FNV-1a hash of
//! the label's UTF-8 bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(seed: u64, label: &str) -> u64 {
    mix(seed ^ mix(fnv1a(label)))
}

pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    mix(derive(seed, label) ^ mix(index.wrapping_add(GOLDEN)))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

pub fn stream_indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, label, index))
}
