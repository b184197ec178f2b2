//! Seed plumbing. Every stochastic component draws from its own ChaCha stream
//! derived from a base seed, a stream tag and an index, so batches of episodes
//! can be replayed (or run in parallel) without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
pub mod stream {
    pub const ENV: u64 = 0x01;
    pub const MASK: u64 = 0x02;
    pub const EXPLAIN: u64 = 0x03;
    pub const SELECT: u64 = 0x04;
    pub const ATTACK: u64 = 0x05;
    pub const HARVEST: u64 = 0x06;
    pub const TRAIN: u64 = 0x07;
    pub const INIT: u64 = 0x08;
    pub const ORACLE: u64 = 0x09;
    pub const BASELINE: u64 = 0x0a;
    pub const SAMPLE: u64 = 0x0b;
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream.wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}

pub fn derived_rng(base: u64, stream: u64, index: u64) -> Rng {
    rng_from(derive_seed(base, stream, index))
}
