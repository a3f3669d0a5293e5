//! Deterministic, splittable random streams.
//!
//! Backed by ChaCha8, which is counter based: a `(seed, stream)` pair selects
//! an independent keystream and the word position is the counter. Parallel
//! tasks take `split` children keyed by task index instead of sharing state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Recorded in run manifests.
pub const GENERATOR_NAME: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child stream. Does not advance `self`.
    pub fn split(&self, id: u64) -> RngState {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream));
        RngState::with_stream(child_seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Sample in `[lo, hi)`; exactly `lo` when the interval is degenerate.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        ensure!(lo <= hi, InvalidParam, "uniform bounds reversed: {lo} > {hi}");
        if lo == hi {
            return Ok(lo);
        }
        let u: f64 = self.inner.random();
        let x = lo + (hi - lo) * u;
        // guard against rounding up to `hi`
        Ok(if x >= hi { lo } else { x })
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    /// i.i.d. normal tensor.
    pub fn gaussian(&mut self, dims: &[usize], mean: f64, stddev: f64) -> Result<Tensor> {
        ensure!(
            stddev >= 0.0 && stddev.is_finite(),
            InvalidParam,
            "stddev must be finite and non-negative, got {stddev}"
        );
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| (mean + stddev * self.standard_normal()) as f32)
            .collect();
        Tensor::new(dims.to_vec(), data)
    }
}
