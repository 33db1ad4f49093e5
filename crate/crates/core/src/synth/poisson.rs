//! Poisson draws that accept a zero mean.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

pub fn sample<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    }
}
