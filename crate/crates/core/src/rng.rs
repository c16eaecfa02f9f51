//! Seeded, portable randomness.
//!
//! All stochastic behavior in the crate flows through [`SeededRng`], a
//! ChaCha8 generator keyed from a 64-bit seed. Equal seeds give equal draw
//! sequences on every platform. Named substreams derived from one seed stay
//! independent of how much the parent has been used, which keeps pipeline
//! stages reproducible in isolation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Deterministic random generator with substream derivation.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named substream of this seed. The result
    /// depends only on the seed and the stream id, never on draws already
    /// made from `self`.
    pub fn derive(&self, stream: u64) -> Self {
        SeededRng::new(mix(self.seed.wrapping_add(mix(stream.wrapping_add(1)))))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform<T: Scalar>(&mut self) -> T {
        T::from(self.inner.random::<f64>()).unwrap()
    }

    /// Standard normal draw.
    pub fn normal<T: Scalar>(&mut self) -> T {
        let x: f64 = StandardNormal.sample(&mut self.inner);
        T::from(x).unwrap()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<E>(&mut self, values: &mut [E]) {
        values.shuffle(&mut self.inner);
    }

    /// Samples `k` distinct indices from [0, n) without replacement.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values from {n}");
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}
