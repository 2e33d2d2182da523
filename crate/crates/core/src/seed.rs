//! Seed derivation. One master seed fans out into independent ChaCha streams
//! keyed by (component, task).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod component {
    pub const EPISODES: u64 = 1;
    pub const MULTISTEP: u64 = 2;
    pub const CONTRASTIVE: u64 = 3;
    pub const RL: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const ALIGN: u64 = 6;
    pub const RANDOM_ENV: u64 = 7;
    pub const SIMULATE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, component: u64, task: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ component) ^ task.rotate_left(17))
}

pub fn stream(master: u64, component: u64, task: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component, task))
}

/// Draw an index from a probability vector. Falls back to the last index with
/// positive mass when rounding leaves the cumulative sum just below the draw.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
