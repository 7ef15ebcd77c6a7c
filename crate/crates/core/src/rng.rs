//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`SplitMix64`] generator whose
//! state is derived from one run seed and a stream name (`"data"`, `"init"`,
//! `"sampling"`, ...). The derivation is `splitmix64(seed ^ fnv1a64(name))`,
//! so streams can be varied independently and reproduce across platforms.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const NOISE: &str = "noise";

fn fnv1a64(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Named sub-stream of a run seed.
pub fn stream(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ fnv1a64(name))
}
