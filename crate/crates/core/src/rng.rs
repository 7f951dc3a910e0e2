//! Seed derivation. Every stochastic step gets its own ChaCha stream keyed
//! by the master seed and a small tuple of stream coordinates, so results do
//! not depend on how many draws earlier stages consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with stream coordinates into a new seed.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}

// Stream tags, one per consumer.
pub const TAG_IFOREST: u64 = 1;
pub const TAG_SMOTE: u64 = 2;
pub const TAG_SPLIT: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_SHUFFLE: u64 = 5;
pub const TAG_DROPOUT: u64 = 6;
pub const TAG_SYNTH: u64 = 7;
pub const TAG_EXPLAIN: u64 = 8;
