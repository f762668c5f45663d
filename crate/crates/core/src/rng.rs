//! Deterministic RNG derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from (seed, purpose tags). Streams are stateless functions of their
//! tags, so dataset generation, batch sampling and parameter init are
//! reproducible bit-for-bit and independent of evaluation order — resuming
//! a run from a checkpoint only needs the step counter, never RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby tag values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for (seed, tags...). Identical inputs give identical streams.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Well-known purpose tags, kept in one place so call sites cannot collide.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const PARAMS: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const GRADCHECK: u64 = 5;
}
