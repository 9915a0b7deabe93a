//! Seedable random source.
//!
//! The generator is xoshiro256++ seeded through SplitMix64
//! (`rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64`). Gaussian draws use
//! the Box–Muller transform: each pair of normals consumes two 64-bit
//! outputs `u1, u2` (53-bit mantissas, `u1` mapped to `(0, 1]`), producing
//! `r·cos θ` then `r·sin θ`. An odd-length fill discards the final sine.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::element::Element;
use crate::error::Result;
use crate::tensor::{check_shape, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

const TWO_POW_53: f64 = (1u64 << 53) as f64;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this seed and a tag.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut mix = Xoshiro256PlusPlus::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Self::new(mix.next_u64())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 / TWO_POW_53
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn fill_normal<T: Element>(&mut self, out: &mut [T]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = T::from_f64_lossy(a);
            pair[1] = T::from_f64_lossy(b);
        }
        if let [last] = chunks.into_remainder() {
            *last = T::from_f64_lossy(self.normal_pair().0);
        }
    }

    /// Tensor of i.i.d. standard normal samples.
    pub fn gaussian<T: Element>(&mut self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let mut data = vec![T::zero(); n];
        self.fill_normal(&mut data);
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f32> = Rng::new(5).gaussian([3, 7]).unwrap();
        let b: Tensor<f32> = Rng::new(5).gaussian([3, 7]).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f64> = Rng::new(1).gaussian([16]).unwrap();
        let b: Tensor<f64> = Rng::new(2).gaussian([16]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn moments_within_four_sigma() {
        let x: Tensor<f64> = Rng::new(42).gaussian([100_000]).unwrap();
        let n = x.numel() as f64;
        let mean = x.sum_f64() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "var {var}");
    }

    #[test]
    fn derived_streams_are_distinct() {
        let a = Rng::derive(9, 0).next_u64();
        let b = Rng::derive(9, 1).next_u64();
        assert_ne!(a, b);
    }
}
