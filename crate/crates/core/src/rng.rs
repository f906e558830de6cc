//! Seeded random streams.
//!
//! Every stochastic step in the simulator draws from a ChaCha stream derived
//! from the run seed plus a list of tags (user id, round, purpose), so results
//! are independent of scheduling order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Distinct values keep derived streams disjoint.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const KEYGEN: u64 = 5;
    pub const MATCH: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const PSEUDONYM: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tags into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}
