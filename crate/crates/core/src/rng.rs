//! Seeded random streams.
//!
//! All randomness goes through ChaCha8, a counter-based stream cipher generator
//! whose output is fixed across platforms for a given seed. Normal variates use
//! the ziggurat sampler of `rand_distr::StandardNormal`, which is also
//! platform independent. Together these make every seed portable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (`stream` picks the ChaCha stream id).
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| standard_normal(rng)).collect()
}

/// Uniform draw on the open interval `(lo, hi)`.
pub fn uniform_open(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return lo + (hi - lo) * u;
        }
    }
}
