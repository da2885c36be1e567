//! Seed derivation.
//!
//! All randomness in an experiment descends from one root seed. Each consumer
//! asks for a named sub-stream (`"dataset"`, `"augment"`, `"init"`, `"shuffle"`,
//! ...) and optionally a counter, so that per-step and per-sample generators can
//! be rebuilt independently of the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATASET: &str = "dataset";
pub const STREAM_AUGMENT: &str = "augment";
pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the 64-bit seed of sub-stream `name`, item `counter`.
pub fn derive_seed(root: u64, name: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name)).wrapping_add(splitmix64(counter)))
}

pub fn stream(root: u64, name: &str, counter: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, counter))
}
