//! Seeded, forkable random streams.
//!
//! Each stream is a ChaCha20 generator seeded from a 64-bit value. Child
//! streams are derived from `(parent seed, label)` by hashing the label with
//! FNV-1a and mixing it into the parent seed with a SplitMix64 finalizer, so a
//! child never depends on how many values the parent has already drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `label`.
    pub fn fork(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// I.i.d. normal tensor drawn from this stream. A zero `std` yields the
    /// constant `mean` without consuming draws.
    pub fn gaussian_tensor<S: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![S::of(mean); n]
        } else {
            (0..n).map(|_| S::of(mean + std * self.gaussian())).collect()
        };
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Gaussian tensor determined entirely by `(rng.seed(), label)`.
pub fn sample_gaussian<S: Scalar>(
    rng: &SeededRng,
    label: &str,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Result<Tensor<S>> {
    if !(std >= 0.0) {
        return Err(Error::Parameter(format!("std must be non-negative, got {std}")));
    }
    Ok(rng.fork(label).gaussian_tensor(shape, mean, std))
}
