//! Deterministic seeding helpers. Every stochastic component draws from a
//! ChaCha stream derived from (run seed, stream id).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type NapRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> NapRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer over (seed, stream); distinct streams get
/// decorrelated seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> NapRng {
    seeded(derive_seed(seed, stream))
}
