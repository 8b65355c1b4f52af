//! Seeded random streams.
//!
//! Every consumer draws from a ChaCha20 stream selected by `(seed, stream)`,
//! so a client's data depends only on the experiment seed and its own id.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Stream identifier reserved for the row shuffle of [`crate::data::partition`].
pub const PARTITION_STREAM: u64 = u64::MAX;
/// Stream identifier reserved for the planted classifier.
pub const PLANTED_STREAM: u64 = u64::MAX - 1;

/// Version tag of the sampling scheme. Bump when any draw order changes.
pub const STREAM_VERSION: u32 = 1;

pub struct Stream {
    inner: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on the closed range `[lo, hi]`, without modulo bias.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        if span == 0 {
            return lo + self.next_u64() as usize;
        }
        let accept_below = (u64::MAX / span) * span;
        loop {
            let v = self.next_u64();
            if v < accept_below {
                return lo + (v % span) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Student-t with `dof` degrees of freedom as `Z / sqrt(V / dof)`.
    pub fn student_t(&mut self, dof: usize) -> f64 {
        let z = self.normal();
        let v: f64 = (0..dof).map(|_| self.normal().powi(2)).sum();
        z / (v / dof as f64).sqrt()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(0, i);
            items.swap(i, j);
        }
    }
}
