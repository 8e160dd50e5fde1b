//! Seeded, portable randomness.
//!
//! The repo-wide generator is ChaCha8 (`rand_chacha::ChaCha8Rng`): a given
//! (seed, stream) pair yields the same draw sequence on every platform.
//! Independent substreams of one master seed are addressed through
//! [`SeededRng::substream`], which packs a domain byte and two indices into
//! ChaCha's 64-bit stream id. Shuffling and sampling-without-replacement are
//! implemented here (plain Fisher-Yates) so that drawn sequences are fixed by
//! this crate, not by implementation details of a dependency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic random generator. See module docs for the algorithm choice.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream of the same seed, addressed by a domain byte and
    /// two indices (epoch-sized and step-sized in practice).
    pub fn substream(seed: u64, domain: u8, a: u32, b: u32) -> Self {
        let stream = ((domain as u64) << 56) | ((a as u64 & 0xff_ffff) << 32) | b as u64;
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn uniform_usize(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range [{lo}, {hi}]");
        self.inner.random_range(lo..=hi)
    }

    /// Uniform float in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Fresh 64-bit value, e.g. to derive a child seed.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_usize(0, i);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, returned sorted ascending.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.uniform_usize(i, n - 1);
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
