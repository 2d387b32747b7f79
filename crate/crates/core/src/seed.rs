//! Stable seed derivation.
//!
//! Every random stream in a simulation is keyed off the master seed through
//! [`derive`], so the stream a client sees in a given round does not depend
//! on scheduling or on which other clients were drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Domain tags keeping independent streams apart.
pub mod domain {
    pub const INIT: u64 = 0x494e_4954;
    pub const DATA: u64 = 0x4441_5441;
    pub const TEST: u64 = 0x5445_5354;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const SAMPLER: u64 = 0x5341_4d50;
    pub const TRAIN: u64 = 0x5452_4e00;
    pub const COMPRESS: u64 = 0x434d_5052;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `base` with a splitmix64 chain. Platform independent.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}
