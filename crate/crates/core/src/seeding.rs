//! Stateless seed derivation, so every random draw is a pure function of
//! (run seed, iteration, purpose, index) and a run can resume from `t` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Purpose tags keep independent streams apart.
pub mod purpose {
    pub const LABELED_ORDER: u64 = 1;
    pub const UNLABELED_ORDER: u64 = 2;
    pub const WEAK_LABELED: u64 = 3;
    pub const WEAK_UNLABELED: u64 = 4;
    pub const STRONG: u64 = 5;
    pub const BLEND: u64 = 6;
    pub const GENERATE: u64 = 7;
    pub const INIT: u64 = 8;
}
