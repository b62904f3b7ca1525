//! Deterministic random streams.
//!
//! Every stream is keyed by a tuple such as `(seed, tag, repetition, step)`, so
//! adding repetitions or steps never perturbs the streams of earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_STEP: u64 = 2;
pub const TAG_EVAL: u64 = 3;
pub const TAG_DATA: u64 = 4;
pub const TAG_SIR: u64 = 5;
pub const TAG_MC: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
