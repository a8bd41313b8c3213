//! Seed derivation for independent random streams.
//!
//! Every stochastic step draws from a stream keyed by `(seed, tags...)`, so a
//! result never depends on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream domains, so that e.g. epoch 3 of training and user 3 of
/// evaluation never share a stream.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const WALKS: u64 = 6;
}
