//! Seed derivation for reproducible runs.
//!
//! Every stochastic component (environment, learner, evaluation episodes)
//! draws from its own ChaCha8 stream derived from a master seed plus a tag
//! path, so runs are bit-reproducible and independent components never share
//! a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer, used to mix tag words into the master seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG from `master` and a tag path.
///
/// Identical `(master, tags)` always yields an identical stream; any change
/// to either yields an unrelated stream.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(master);
    for &t in tags {
        state = mix(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Tag constants for the library's RNG streams.
pub mod stream {
    pub const ENV: u64 = 0x01;
    pub const AGENT: u64 = 0x02;
    pub const EVAL: u64 = 0x03;
    pub const FP: u64 = 0x04;
}
