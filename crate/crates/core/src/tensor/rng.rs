//! Deterministic random streams.
//!
//! Every stream is ChaCha8 keyed by `seed_from_u64`, which is specified
//! bit-for-bit by `rand_core` and therefore identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for the `index`-th member of a seeded family.
pub(crate) fn substream(seed: u64, index: u64) -> SeededRng {
    // splitmix64 finalizer to decorrelate neighbouring (seed, index) pairs
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    seeded_rng(z ^ (z >> 31))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
