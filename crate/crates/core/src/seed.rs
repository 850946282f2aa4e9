//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic component takes an explicit seed. Child seeds are derived
//! by folding a list of integers (global seed, device id, epoch, ...) through
//! the SplitMix64 finalizer, so streams for different devices or epochs are
//! decorrelated while remaining a pure function of their inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN_GAMMA, |acc, &p| {
        mix(acc.wrapping_add(GOLDEN_GAMMA) ^ mix(p.wrapping_add(GOLDEN_GAMMA)))
    })
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
