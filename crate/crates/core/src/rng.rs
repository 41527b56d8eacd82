//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded from a
//! master seed mixed with a tag, so that independent consumers (trials,
//! adapters, tasks) never share a stream and reruns are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Tags used to separate the RNG streams of different subsystems.
pub mod tag {
    pub const CENTROIDS: u64 = 1;
    pub const TASK_EMBEDDING: u64 = 2;
    pub const ADAPTER: u64 = 3;
    pub const BASE_MODEL: u64 = 4;
    pub const GROUND_TRUTH: u64 = 5;
    pub const TOY_TASK: u64 = 6;
    pub const TRIAL: u64 = 7;
    pub const ORDER: u64 = 8;
}
