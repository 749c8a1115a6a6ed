//! Seeded random streams.
//!
//! Every random decision in the crate is drawn from a ChaCha8 stream identified
//! by `(seed, stream)`. Streams with different ids never overlap, so work split
//! by batch index reproduces bit-for-bit regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the different consumers of a run seed.
pub mod purpose {
    pub const INIT: u64 = 1 << 40;
    pub const PERTURB: u64 = 2 << 40;
    pub const SHUFFLE: u64 = 3 << 40;
    pub const JITTER: u64 = 4 << 40;
    pub const SAMPLE: u64 = 5 << 40;
    pub const NEIGHBORHOOD: u64 = 6 << 40;
    pub const SPLIT: u64 = 7 << 40;
    pub const CORPUS: u64 = 8 << 40;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
