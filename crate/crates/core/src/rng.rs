//! Deterministic random streams.
//!
//! An [`Rng`] is identified by `(seed, stream)`; equal pairs yield identical
//! sequences on every platform. Parallel workers each take their own stream.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Sample from `N(0, sigma^2)`; exactly zero when `sigma == 0`.
    pub fn normal(&mut self, sigma: f64) -> f64 {
        let z = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.inner);
        if sigma == 0.0 {
            0.0
        } else {
            sigma * z
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform_tensor(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(dims, |_| self.uniform(lo, hi))
    }
}
