//! Deterministic random streams keyed by `(seed, purpose, index)`.
//!
//! Every repetition and every perturbation resample draws from its own stream, so the
//! numbers it sees never depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; distinct values keep data generation and resampling independent.
pub const PURPOSE_DATA: u64 = 1;
pub const PURPOSE_PERTURB: u64 = 2;
pub const PURPOSE_SEED: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes three words into one 64-bit key.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ purpose) ^ index)
}

pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, 0));
    rng.set_stream(index);
    rng
}
