//! Seeded random streams. All randomness in the crate goes through
//! [`SeededRng`], a ChaCha8 stream keyed by a 64-bit seed, so identical seeds
//! give bit-identical samples on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for a labelled sub-task. Depends only on the
    /// parent seed and the labels, never on how much of the parent was consumed.
    pub fn derive(&self, labels: &[u64]) -> SeededRng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &l in labels {
            h = splitmix(h ^ splitmix(l.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        SeededRng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform() < p
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Beta(alpha, alpha) draw; `alpha <= 0` returns 1.
    pub fn beta_symmetric(&mut self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 1.0;
        }
        Beta::new(alpha, alpha)
            .expect("positive alpha")
            .sample(&mut self.inner)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(self.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(self.uniform_range(lo, hi))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xa: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        let na: Vec<u64> = (0..16).map(|_| a.normal().to_bits()).collect();
        let nb: Vec<u64> = (0..16).map(|_| b.normal().to_bits()).collect();
        assert_eq!(na, nb);
    }

    #[test]
    fn derive_ignores_parent_consumption() {
        let a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        b.next_u64();
        assert_eq!(a.derive(&[1, 2]).next_u64(), b.derive(&[1, 2]).next_u64());
        assert_ne!(a.derive(&[1, 2]).next_u64(), a.derive(&[2, 1]).next_u64());
    }

    #[test]
    fn beta_zero_alpha_is_one() {
        assert_eq!(SeededRng::new(0).beta_symmetric(0.0), 1.0);
    }
}
