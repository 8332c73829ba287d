//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed, a
//! stream tag and an index (episode, plan id, update count). No generator
//! state has to be persisted: the triple is enough to reproduce it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags never share a keystream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const INFERENCE_MASKS: u64 = 3;
    pub const PLAN: u64 = 4;
    pub const GOAL: u64 = 5;
    pub const WARMUP: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)));
    rng.set_stream(stream);
    rng
}
