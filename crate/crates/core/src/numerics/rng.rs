use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of the splitmix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of stream tags.
///
/// Each tag is folded in with one splitmix64 round, so the seed for
/// `[PARTICIPANT, 7]` does not depend on how many other participants exist.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

/// Inverse CDF of the zero-mean Laplace law with the given scale.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// A seeded, single-owner random stream.
///
/// The same seed always yields the same sequence of draws. Independent
/// streams are obtained with [`RngState::child`], never by sharing one state.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `tag`. Depends only on this stream's seed, not
    /// on how many values have been drawn from it.
    pub fn child(&self, tag: u64) -> RngState {
        RngState::from_seed(derive_seed(self.seed, &[tag]))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the open interval `(0, 1)`.
    fn next_open01(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::param("uniform", format!("need lo < hi, got [{lo}, {hi})")));
        }
        let v = lo + (hi - lo) * self.next_f64();
        // Rounding can land exactly on `hi` for wide ranges.
        Ok(if v >= hi { lo } else { v })
    }

    /// One draw from Laplace(0, `scale`) by inverse CDF.
    pub fn laplace(&mut self, scale: f64) -> Result<f64> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::param("laplace scale", format!("must be > 0, got {scale}")));
        }
        Ok(laplace_inverse_cdf(self.next_open01(), scale))
    }

    pub fn gaussian(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(self);
        mean + sd * z
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            all.swap(i, j);
        }
        all.truncate(k);
        all
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
