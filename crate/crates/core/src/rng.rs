//! Seed derivation. Every random stream in a run is a pure function of the
//! master seed and a small tuple of identifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of stream identifiers.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags so unrelated consumers of the same seed never collide.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const MODEL: u64 = 4;
    pub const HOMO: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const CLIENT: u64 = 7;
    pub const REPEAT: u64 = 8;
}
