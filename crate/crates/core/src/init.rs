//! Seeded weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Standard deviation for every non-zero-initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Draws weights in `f64` and casts, so `f32` and `f64` models built from
/// the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| F::lit(dist.sample(&mut self.rng)))
    }

    pub fn weight<F: Real>(&mut self, shape: &[usize]) -> Tensor<F> {
        self.normal(shape, INIT_STD)
    }
}
