//! Seedable, platform-independent randomness.
//!
//! Every stochastic component draws from ChaCha8 (`rand_chacha`), whose output
//! stream is fixed by its seed on every platform. Independent components use
//! separate streams of the same seed so that, for example, changing the
//! dropout rate does not perturb the shuffling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const CLUSTER_INIT: u64 = 5;
    pub const DATA: u64 = 6;
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
