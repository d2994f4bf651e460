//! Seeded randomness. Every stochastic routine takes an explicit seed and
//! derives independent streams from it, so results never depend on call order
//! across bags or jobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, streams: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &s in streams {
        x = mix(x ^ mix(s.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    x
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, streams: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, streams))
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
