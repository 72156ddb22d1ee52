//! Deterministic RNG streams.
//!
//! Every noisy computation draws from a stream whose seed is a pure function of the
//! master seed and the job coordinates, so results do not depend on execution order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds job coordinates into a master seed.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords.iter().enumerate().fold(splitmix64(master), |acc, (i, &c)| {
        let tag = splitmix64(c.wrapping_add((i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)));
        splitmix64(acc.rotate_left(23) ^ tag)
    })
}

pub fn stream(master: u64, coords: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, coords))
}
