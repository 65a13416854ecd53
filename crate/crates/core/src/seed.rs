//! Seed fan-out. A master seed feeds a SplitMix64 counter stream; stage `s`
//! receives output number `s` of that stream, and per-item seeds inside a
//! stage are derived the same way from the stage seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stage indices for [`derive`].
pub mod stage {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_ATTACK: u64 = 3;
    pub const EVAL_ATTACK: u64 = 4;
    pub const SURROGATE: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output `counter` of the SplitMix64 stream seeded with `seed`.
pub fn derive(seed: u64, counter: u64) -> u64 {
    splitmix64(seed.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
