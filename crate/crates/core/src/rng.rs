//! Counter-based SplitMix64 generator.
//!
//! The `i`-th output (starting at `i = 1`) of a generator with seed `s` is
//! `mix(s + i * 0x9E3779B97F4A7C15)` with wrapping arithmetic, where
//!
//! ```text
//! mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!         z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!         z ^ (z >> 31)
//! ```
//!
//! Derived values:
//! - `uniform()` = `(u >> 11) * 2^-53`, in `[0, 1)`.
//! - `normal()` = Box–Muller cosine branch on two consecutive uniforms,
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`; one normal per two draws.
//! - `below(n)` = high 64 bits of `u * n` (128-bit product).
//! - `fork(k)` = new generator seeded with `mix(s ^ ((k + 1) * 0xD1B54A32D192ED03))`.
//!
//! The integer stream is identical on every platform; derived floats also
//! depend on the platform's `ln`/`cos`.

use crate::tensor::{Element, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const FORK_MUL: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(mix64(
            self.seed ^ stream.wrapping_add(1).wrapping_mul(FORK_MUL),
        ))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(std * self.normal()))
    }

    pub fn uniform_tensor<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.uniform_range(lo, hi)))
    }
}

/// Kaiming-uniform matrix: i.i.d. `U[-√(6/rows), √(6/rows)]`, fan-in = `rows`.
pub fn rand_kaiming_uniform<T: Element>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    assert!(rows >= 1 && cols >= 1, "kaiming init needs positive dims");
    let bound = (6.0 / rows as f64).sqrt();
    rng.uniform_tensor(&[rows, cols], -bound, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vector() {
        // Reference SplitMix64 with state 0: first outputs.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn kaiming_bound_and_determinism() {
        let a: Tensor<f32> = rand_kaiming_uniform(&mut Rng::new(3), 6, 50);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b: Tensor<f32> = rand_kaiming_uniform(&mut Rng::new(3), 6, 50);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn kaiming_mean_is_near_zero() {
        let a: Tensor<f64> = rand_kaiming_uniform(&mut Rng::new(11), 6, 100_000);
        let mean = a.data().iter().sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(5);
        let xs: Vec<f64> = (0..200_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let root = Rng::new(42);
        let mut a = root.fork(1);
        let mut b = root.fork(2);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(root.fork(1).next_u64(), Rng::new(42).fork(1).next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(9);
        assert!((0..1000).all(|_| r.below(7) < 7));
    }
}
