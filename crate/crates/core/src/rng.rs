//! Seeded, portable random streams.
//!
//! Every random draw in the crate goes through ChaCha8 seeded from a `u64`.
//! Sub-streams (per room, per band, per position) get their own seed derived
//! with a SplitMix64 mix of the parent seed and the stream indices, so results
//! do not depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of stream indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `len` samples of standard Gaussian noise.
pub fn gaussian_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
