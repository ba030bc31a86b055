//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`Rng`], a ChaCha8 generator.
//! Independent streams (per SDE sample path, per training iteration) come
//! from `set_stream`/`derive_seed`, so results are reproducible regardless
//! of evaluation order.

use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// SplitMix64 finalizer; decorrelates nearby seeds/tags.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub struct Rng {
    inner: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed), cached_normal: None }
    }

    /// Generator for stream `stream` of `seed` (used for per-path noise).
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner, cached_normal: None }
    }

    /// Uniform in the half-open interval (0, 1].
    pub fn uniform(&mut self) -> f64 {
        (((self.inner.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform integer in `[0, n)` by rejection (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.cached_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Fisher–Yates shuffled `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// `k` distinct indices drawn from `0..n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut perm = self.permutation(n);
        perm.truncate(k);
        perm
    }
}
