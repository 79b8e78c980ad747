//! Seed plumbing.
//!
//! Every random stream in an experiment is derived from one experiment seed
//! and a stream name, so adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Named sub-streams used throughout the lab.
pub mod streams {
    pub const DATA: &str = "data";
    pub const OOD: &str = "ood";
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const TRIGGERS: &str = "triggers";
    pub const LABELS: &str = "labels";
    pub const DIRECTIONS: &str = "directions";
    pub const SMOOTHING: &str = "smoothing";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable derivation of a sub-seed from a parent seed and a stream name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

pub fn derive_index(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

pub fn stream(seed: u64, name: &str) -> LabRng {
    rng_from(derive_seed(seed, name))
}
