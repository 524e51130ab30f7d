//! Reproducible random streams.
//!
//! Backed by ChaCha8 (a counter-based generator). A `(seed, stream)` pair
//! selects an independent keystream, so parallel consumers can be handed
//! their own substream up front instead of sharing state. Normals come from
//! the Box–Muller transform over 53-bit uniforms, which keeps the output
//! bit-identical on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream labelled `label`; independent of how much of `self` has
    /// been consumed.
    pub fn substream(&self, label: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream ^ splitmix64(label.wrapping_add(1))))
    }

    /// `n` children with labels `0..n`.
    pub fn split(&self, n: usize) -> Vec<Self> {
        (0..n as u64).map(|i| self.substream(i)).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < 2^-64 * n and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn randn<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` (partial Fisher–Yates), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_is_bit_identical() {
        let a = Rng::new(42, 7).randn::<f64>(&[4, 16]);
        let b = Rng::new(42, 7).randn::<f64>(&[4, 16]);
        let bytes = |t: &Tensor<f64>| t.data().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(a, Rng::new(42, 8).randn::<f64>(&[4, 16]));
    }

    #[test]
    fn normal_moments() {
        let x = Rng::new(1, 0).randn::<f64>(&[100_000]);
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 100_000;
        let a = Rng::new(5, 0).randn::<f64>(&[n]);
        let b = Rng::new(5, 1).randn::<f64>(&[n]);
        let c = Rng::new(5, 0).substream(3).randn::<f64>(&[n]);
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            let rho = correlation(x.data(), y.data());
            assert!(rho.abs() < 0.02, "rho {rho}");
        }
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn substream_ignores_parent_position() {
        let mut parent = Rng::new(9, 2);
        let before = parent.substream(4).next_u64();
        parent.next_u64();
        assert_eq!(before, parent.substream(4).next_u64());
    }

    #[test]
    fn sample_indices_distinct() {
        let mut r = Rng::new(0, 0);
        let mut s = r.sample_indices(100, 30);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 30);
        assert!(s.iter().all(|&i| i < 100));
    }
}
