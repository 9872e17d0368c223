//! Seeded random streams.
//!
//! Every random draw in a run derives from one user seed. Independent parts of
//! the computation take their own ChaCha stream so that adding draws in one
//! place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substreams used across the crate.
pub mod stream {
    pub const KMEANS: u64 = 1;
    pub const EM_RESEED: u64 = 2;
    pub const XAVIER: u64 = 3;
    pub const GMM_SAMPLE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
    /// SDCA for class `c` uses `SDCA_BASE + c`.
    pub const SDCA_BASE: u64 = 1 << 16;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
