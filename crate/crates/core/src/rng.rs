//! Seeded, platform-independent random streams (ChaCha8).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// An independent stream under the same seed. Training shuffles and
    /// teleport batch draws use different streams so that enabling one never
    /// shifts the other.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position of the underlying block counter, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("normal samples are finite")
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_f64(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("uniform samples are finite")
    }

    /// A uniformly random permutation of `0..n`.
    pub fn shuffle(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}

pub fn rng_normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.normal(shape)
}

pub fn rng_shuffle(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    rng.shuffle(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = SeededRng::new(11).normal(&[3, 4]);
        let b = SeededRng::new(11).normal(&[3, 4]);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn streams_differ() {
        let a = SeededRng::with_stream(11, 0).next_u64();
        let b = SeededRng::with_stream(11, 1).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn shuffle_edge_cases() {
        let mut rng = SeededRng::new(0);
        assert_eq!(rng_shuffle(&mut rng, 1), vec![0]);
        assert!(rng_shuffle(&mut rng, 0).is_empty());
        let mut p = rng_shuffle(&mut rng, 5);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
    }
}
