//! Seed derivation for independent random streams.
//!
//! Every stochastic component draws from its own xoshiro256** generator whose
//! seed is derived from the master seed and a path of stream identifiers, so
//! adding draws to one component never shifts another.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// Stream identifiers. The numeric values are part of the reproducibility
/// contract; never renumber them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dataset = 3,
    Image = 4,
    Noise = 5,
    Probe = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of stream components.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, kind: Stream, path: &[u64]) -> Rng {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(kind as u64);
    full.extend_from_slice(path);
    Rng::seed_from_u64(derive(seed, &full))
}
