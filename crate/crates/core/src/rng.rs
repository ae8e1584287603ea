//! Deterministic random-number plumbing.
//!
//! Every stochastic component draws from a ChaCha8 generator keyed by a
//! user seed plus an explicit stream index, so bootstrap replicate b and
//! Monte Carlo replication r consume fixed, non-overlapping streams no
//! matter how work is scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for the given seed on stream 0.
pub fn master(seed: u64) -> ChaCha8Rng {
    substream(seed, 0)
}

/// Independent generator keyed by (seed, stream).
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}

/// SplitMix64 mix step; derives child seeds from a parent seed and a salt.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Salts separating the independent random stream families of a run.
pub mod salt {
    pub const DATA: u64 = 1;
    pub const MULTIPLIERS: u64 = 2;
    pub const FOLDS: u64 = 3;
    pub const ORACLE: u64 = 4;
}
