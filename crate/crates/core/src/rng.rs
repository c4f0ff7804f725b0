//! Seeded random streams.
//!
//! Uniform bits come from ChaCha8, whose output is specified independently
//! of the host. Standard normals use the Box–Muller transform evaluated with
//! `libm`, so the transcendental functions do not depend on the platform's
//! C math library either. Each call to [`RngStream::standard_normal`]
//! consumes exactly two uniforms and discards the sine branch, which keeps
//! the stream position a simple function of the number of normals drawn.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard_normal()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derives an independent stream, e.g. one per experiment component.
    pub fn fork(&mut self) -> RngStream {
        RngStream::new(self.next_u64())
    }
}

/// `n` draws of `exp(mu + sigma·y)` with `y` standard normal.
pub fn sample_lognormal(rng: &mut RngStream, mu: f64, sigma: f64, n: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be positive and finite, got {sigma}")));
    }
    if !mu.is_finite() {
        return Err(Error::param("mu", format!("must be finite, got {mu}")));
    }
    if n == 0 {
        return Err(Error::param("n", "must draw at least one sample"));
    }
    let data: Vec<f64> = (0..n).map(|_| libm::exp(mu + sigma * rng.standard_normal())).collect();
    Tensor::new(vec![n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..1000 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
        assert_ne!(RngStream::new(1).uniform(), RngStream::new(2).uniform());
    }

    #[test]
    fn degenerate_sigma_gives_ones() {
        let mut rng = RngStream::new(0);
        let t = sample_lognormal(&mut rng, 0.0, 1e-300, 4).unwrap();
        for v in t.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let mut rng = RngStream::new(0);
        assert!(matches!(sample_lognormal(&mut rng, 0.0, 0.0, 3), Err(Error::Parameter { .. })));
        assert!(matches!(sample_lognormal(&mut rng, 0.0, -1.0, 3), Err(Error::Parameter { .. })));
    }

    #[test]
    fn median_matches_exp_mu() {
        let mut rng = RngStream::new(7);
        let mut v = sample_lognormal(&mut rng, 0.1, 1.0, 1_000_000).unwrap().into_data();
        v.sort_by(f64::total_cmp);
        let median = 0.5 * (v[499_999] + v[500_000]);
        let want = 0.1f64.exp();
        assert!((median / want - 1.0).abs() < 0.01, "median {median} vs {want}");
        assert!(v[0] > 0.0);
    }

    #[test]
    fn mean_agrees_with_independent_sampler() {
        let n = 100_000;
        let mut rng = RngStream::new(42);
        let ours = sample_lognormal(&mut rng, 0.0, 1.0, n).unwrap().mean();

        // Oracle: rand_distr's ziggurat normal, exponentiated by hand.
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(42);
        let theirs: f64 = (0..n)
            .map(|_| {
                let y: f64 = StandardNormal.sample(&mut oracle_rng);
                y.exp()
            })
            .sum::<f64>()
            / n as f64;

        let analytic = 0.5f64.exp();
        assert!((ours / analytic - 1.0).abs() < 0.02, "ours {ours}");
        assert!((theirs / analytic - 1.0).abs() < 0.02, "oracle {theirs}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(9);
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
