//! Deterministic randomness.
//!
//! Every random draw in the crate flows through [`Rng`], a thin wrapper over
//! ChaCha8 keyed by a 64-bit seed and a 64-bit stream index. ChaCha output is
//! specified bit-for-bit, so a seed reproduces the same sequence on every
//! platform, and distinct streams of one seed share no state.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` derived from `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_index(&self) -> u64 {
        self.inner.get_stream()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_do_not_share_state() {
        let mut a = Rng::stream(9, 0);
        let mut b = Rng::stream(9, 1);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert!(xs.iter().all(|x| !ys.contains(x)));

        // advancing one stream leaves the other untouched
        let mut c = Rng::stream(9, 1);
        let mut d = Rng::stream(9, 0);
        for _ in 0..1000 {
            d.next_u64();
        }
        let zs: Vec<u64> = (0..64).map(|_| c.next_u64()).collect();
        assert_eq!(ys, zs);
    }

    #[test]
    fn known_outputs_are_pinned() {
        // catches a dependency upgrade that silently changes the stream
        assert_eq!(Rng::new(0).next_u64(), 13080132717333068652);
        assert_eq!(Rng::stream(0, 3).next_u64(), 722560577158678697);
    }
}
