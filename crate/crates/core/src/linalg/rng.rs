use rand_core::{RngCore, SeedableRng};
use rand_xorshift::XorShiftRng;

/// Seeded generator used for weight init, scene synthesis and dropout.
///
/// The stream is Marsaglia's xorshift128 (`XorShiftRng`) seeded from a `u64`
/// through `SeedableRng::seed_from_u64` (a PCG32 expansion of the seed).
/// Uniform reals take the top 53 bits of `next_u64`: `(x >> 11) · 2⁻⁵³`.
/// Normal draws use the Box–Muller transform on two uniforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: XorShiftRng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: XorShiftRng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream for a labelled sub-task.
    pub fn fork(&mut self, label: u64) -> Self {
        let s = self.inner.next_u64() ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.unit() * n as f64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn fill_uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}
