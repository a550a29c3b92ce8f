use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};

use crate::nn::Matrix;

/// Deterministic random source used everywhere in the crate.
///
/// Wraps a counter-based ChaCha stream so that an identical seed yields a
/// bit-identical draw sequence, which makes whole training runs replayable.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream, advancing this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen::<u64>())
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.standard_normal()).collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn poisson(&mut self, lambda: f64) -> u64 {
        assert!(lambda > 0.0, "poisson rate must be positive");
        let draw: f64 = Poisson::new(lambda)
            .expect("valid rate")
            .sample(&mut self.inner);
        draw as u64
    }

    /// Counts for `n` draws over `q` equiprobable cells, by iterated
    /// binomial conditioning.
    pub fn multinomial_uniform(&mut self, n: usize, q: usize) -> Vec<usize> {
        assert!(q >= 1, "multinomial needs at least one cell");
        let mut counts = Vec::with_capacity(q);
        let mut remaining = n as u64;
        for k in 0..q - 1 {
            let p = 1.0 / (q - k) as f64;
            let c = if remaining == 0 {
                0
            } else {
                Binomial::new(remaining, p)
                    .expect("valid binomial")
                    .sample(&mut self.inner)
            };
            counts.push(c as usize);
            remaining -= c;
        }
        counts.push(remaining as usize);
        counts
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n`, without replacement.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn multinomial_sums_to_n() {
        let mut rng = Rng::new(7);
        for q in [1usize, 2, 5, 17] {
            let counts = rng.multinomial_uniform(1000, q);
            assert_eq!(counts.len(), q);
            assert_eq!(counts.iter().sum::<usize>(), 1000);
        }
    }

    #[test]
    fn multinomial_concentrates_around_uniform() {
        // n=1e5, q=100: each cell ~ Binomial(n, 1/q), sd ~= 31.5
        let mut rng = Rng::new(11);
        let counts = rng.multinomial_uniform(100_000, 100);
        let sd = (100_000.0f64 * 0.01 * 0.99).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - 1000.0).abs() < 5.0 * sd,
                "count {c} too far from 1000"
            );
        }
    }

    #[test]
    fn poisson_moments() {
        let mut rng = Rng::new(3);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.poisson(3.0) as f64).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "poisson mean {mean}");
    }

    #[test]
    fn sample_indices_distinct_and_in_range() {
        let mut rng = Rng::new(5);
        let mut idx = rng.sample_indices(50, 20);
        assert_eq!(idx.len(), 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
        assert!(idx.iter().all(|&i| i < 50));
    }
}
