//! Seeded generators.
//!
//! Every random draw in the library comes from ChaCha8 seeded with a 64-bit
//! seed and a stream number, so results are bit-identical across platforms.
//! Each consumer uses its own stream from the table below.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const SOURCE_DATA: u64 = 2;
    pub const TARGET_DATA: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EVAL: u64 = 6;
    /// Shuffling uses `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent 64-bit seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
