//! Seed-derived random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a master
//! seed and a short path of integers (sample index, iteration, group member).
//! Streams for different paths are independent, so work can be split across
//! threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

// Domain tags keep unrelated consumers of the same master seed apart.
pub const TAG_CLEAN: u64 = 0x11;
pub const TAG_SMOKE: u64 = 0x12;
pub const TAG_UNPAIRED: u64 = 0x13;
pub const TAG_INIT: u64 = 0x21;
pub const TAG_ROLLOUT: u64 = 0x22;
pub const TAG_PRETRAIN: u64 = 0x23;
pub const TAG_RPO: u64 = 0x24;
pub const TAG_CONCEPT: u64 = 0x31;
pub const TAG_PROJECTION: u64 = 0x32;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of integers into a single 64-bit key.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}

pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
