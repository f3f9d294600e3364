//! Seed derivation and counter-based random numbers.
//!
//! Every stochastic step in the crate draws from a stream keyed by an explicit
//! seed, so results never depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for job `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master ^ GOLDEN).wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Uniform value in [0, 1) that depends only on `(seed, counter)`.
#[inline]
pub fn counter_uniform(seed: u64, counter: u64) -> f32 {
    let bits = mix64(seed.wrapping_add(counter.wrapping_mul(GOLDEN)) ^ 0xD1B5_4A32_D192_ED03);
    // 24 high bits give an exactly representable f32 in [0, 1).
    (bits >> 40) as f32 / (1u64 << 24) as f32
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
