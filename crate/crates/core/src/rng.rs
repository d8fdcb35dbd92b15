//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, domain, a, b)`. Streams never share state, so a paired baseline
//! and attack run draw identical numbers for every benign component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream domains. Values are arbitrary but frozen: changing one changes
/// every seeded output.
pub mod domain {
    pub const DATA: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const TRAIN: u64 = 0x05;
    pub const GTG: u64 = 0x06;
    pub const ATTACK: u64 = 0x07;
    pub const TAU: u64 = 0x08;
    pub const VALIDATION_VIEW: u64 = 0x09;
    pub const BYZANTINE: u64 = 0x0a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> Stream {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    ChaCha8Rng::seed_from_u64(h)
}

/// Plain stream from a bare seed.
pub fn from_seed(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}
