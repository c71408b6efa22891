//! Seeded, platform-independent random streams.
//!
//! All randomness in the crate flows through [`SeededRng`], a ChaCha8 stream
//! (20-round family, reduced to 8 rounds) keyed by `ChaCha8Rng::seed_from_u64`.
//! The derived draws below are defined in terms of raw `u64` outputs only, so
//! a seed reproduces the same values on every platform:
//!
//! - `uniform`: `(x >> 11) * 2^-53`, a multiple of `2^-53` in `[0, 1)`.
//! - `index(n)`: rejection sampling on `x` against the largest multiple of `n`.
//! - `bernoulli(p)`: `uniform() < p`.
//! - `standard_normal`: Box-Muller cosine branch using two uniforms, with
//!   `ln`, `sqrt` and `cos` from the pure-Rust `libm` port.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonzero");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Uniform on `[-scale, scale)`.
    pub fn symmetric_uniform(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }
}

/// Fans one master seed out to the independent streams of a run.
///
/// `filter = seed + 1`, `weights = seed + 2`, `data = seed + 3`, all wrapping.
/// The trainer derives its dropout stream as `data + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn filter(&self) -> u64 {
        self.master.wrapping_add(1)
    }

    pub fn weights(&self) -> u64 {
        self.master.wrapping_add(2)
    }

    pub fn data(&self) -> u64 {
        self.master.wrapping_add(3)
    }
}
