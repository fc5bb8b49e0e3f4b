//! Seeded random streams.
//!
//! Every stochastic draw in the crate (weight init, dataset generation,
//! training noise, sampler noise) goes through [`JobRng`] so that a seed
//! fully determines the result. Gaussian draws are taken in `f64` and cast,
//! so `f32` and `f64` runs see the same noise up to rounding.

use candle_core::{Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Real, Result};

#[derive(Clone, Debug)]
pub struct JobRng {
    inner: ChaCha8Rng,
}

impl JobRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed` and a purpose tag.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::lit(self.normal())).collect()
    }

    /// Unit-normal tensor of the given shape, dtype `T`.
    pub fn normal_tensor<T: Real, S: Into<Shape>>(&mut self, shape: S) -> Result<Tensor> {
        let shape = shape.into();
        let data = self.normal_vec::<T>(shape.elem_count());
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
