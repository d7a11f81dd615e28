//! Seeded generators. Every stochastic component takes its own stream derived
//! from a run seed so that adding a consumer never perturbs another.

use rand::SeedableRng;

pub type Rng = rand_pcg::Pcg64;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of run seed `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    Rng::seed_from_u64(z ^ (z >> 31))
}
