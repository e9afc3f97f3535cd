//! Deterministic random number generation.
//!
//! Every random draw in the crate goes through [`Rng`], a ChaCha8 stream
//! seeded from a 64-bit integer. ChaCha8's output is specified bit-for-bit,
//! so the same seed yields the same sequence on every platform.
//!
//! Sub-seeds for individual modules are `seed ^ stream` where `stream` is one
//! of the constants in [`streams`]; indexed children (one per scan, fold,
//! batch item, ...) are derived from that with [`sub_seed`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-module stream constants XOR-ed into the global seed.
pub mod streams {
    pub const PHANTOM: u64 = 0x5048_414E_544F_4D00;
    pub const COHORT: u64 = 0x434F_484F_5254_0000;
    pub const FOLDS: u64 = 0x464F_4C44_5300_0000;
    pub const TRAIN: u64 = 0x5452_4149_4E00_0000;
    pub const AUGMENT: u64 = 0x4155_474D_454E_5400;
    pub const EVAL: u64 = 0x4556_414C_0000_0000;
    pub const EXPLAIN: u64 = 0x4558_504C_4149_4E00;
}

/// SplitMix64 finalizer, used to spread indices before XOR mixing.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child of `stream` under the global `seed`.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64((seed ^ stream) ^ mix64(index))
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for a module stream: seeded with `seed ^ stream`.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream)
    }

    /// Child generator for parallel work; consumes one value from `self`.
    pub fn fork(&mut self) -> Rng {
        Rng::new(mix64(self.inner.next_u64()))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, self)
    }

    /// In-place Fisher–Yates shuffle driven by [`Rng::next_f64`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Shuffled copy of `items`.
    pub fn shuffled<T: Clone>(&mut self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        self.shuffle(&mut out);
        out
    }
}

impl RngCore for Rng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let xs: Vec<f64> = (0..100).map(|_| a.next_f64()).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.next_f64()).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn shuffle_single_element() {
        let mut rng = Rng::new(1);
        assert_eq!(rng.shuffled(&[5]), vec![5]);
    }

    #[test]
    fn shuffle_golden_seed_42() {
        let mut rng = Rng::new(42);
        let out = rng.shuffled(&[1, 2, 3, 4]);
        // recorded at first implementation
        assert_eq!(out, GOLDEN_SHUFFLE_42);
    }

    const GOLDEN_SHUFFLE_42: [i32; 4] = [2, 1, 4, 3];

    #[test]
    fn streams_are_distinct() {
        let a = sub_seed(1, streams::PHANTOM, 0);
        let b = sub_seed(1, streams::COHORT, 0);
        let c = sub_seed(1, streams::PHANTOM, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
