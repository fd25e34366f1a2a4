//! Deterministic derivation of independent RNG seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for seeds derived from a run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const STUDENT_ATTACK: u64 = 3;
    pub const TEACHER_ATTACK: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const DATA: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of coordinates (stream, epoch, batch...).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
