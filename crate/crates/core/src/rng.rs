//! Seeded random sources.
//!
//! Every stochastic component draws from [`Rng`], a ChaCha stream cipher with
//! 8 rounds (`rand_chacha::ChaCha8Rng`). Seeding goes through `seed_from_u64`,
//! whose expansion is fixed by `rand_core`, so a given seed yields the same
//! stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, a, b)`, e.g. one dropout stream per
/// (training step, example index). Stable regardless of thread scheduling.
pub fn derived(seed: u64, a: u64, b: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ splitmix(b)));
    rng
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
