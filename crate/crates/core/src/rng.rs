//! Independent seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids: every consumer of a run seed draws from its own stream so
/// adding draws in one place never shifts another.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const KMEANS: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const CORPUS: u64 = 8;
    pub const LAYOUT: u64 = 9;
    pub const NOISE: u64 = 10;
    pub const EVAL: u64 = 11;
    pub const SHADOW: u64 = 12;
    pub const VARIABILITY: u64 = 13;
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
