//! Seedable, portable random stream shared by selection and window capping.
//!
//! Backed by ChaCha8 so that a seed yields the same draws on every platform.
//! Only two primitives are exposed and both consume `u64` words, which keeps
//! the stream independent of `usize` width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRng {
    inner: ChaCha8Rng,
}

impl SearchRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index over an empty range");
        self.inner.gen_range(0..n as u64) as usize
    }

    /// `k` distinct positions out of `0..n` by partial Fisher-Yates,
    /// consuming exactly `min(k, n)` index draws.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
