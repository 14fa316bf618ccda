//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream_id, position)`: the generator is
//! ChaCha8 keyed by the seed, with `stream_id` selecting the ChaCha stream (nonce) and
//! the block counter acting as the position. Two samplers sharing a seed but using
//! different stream ids never share output.
//!
//! Normals use the Box–Muller transform on pairs of 53-bit uniforms:
//!
//! ```text
//! u1 = (w1 >> 11 + 1) · 2^-53        in (0, 1]
//! u2 = (w2 >> 11)     · 2^-53        in [0, 1)
//! z0 = sqrt(-2 ln u1) · cos(2π u2)
//! z1 = sqrt(-2 ln u1) · sin(2π u2)
//! ```
//!
//! `z0` is returned first, `z1` is held for the next call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    core: ChaCha8Rng,
    spare: Option<f64>,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            core,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in 32-bit words consumed from the underlying counter.
    pub fn position(&self) -> u128 {
        self.core.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.core.next_u64() >> 11) as f64 * INV_2_53
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi` via multiply-high; bias is below 2^-40 for any
    /// range used here.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo) as u128 + 1;
        lo + ((self.core.next_u64() as u128 * span) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.core.next_u64() >> 11) + 1) as f64 * INV_2_53;
        let u2 = (self.core.next_u64() >> 11) as f64 * INV_2_53;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// `C×H×W` tensor of i.i.d. standard normals.
    pub fn gaussian(&mut self, channels: usize, height: usize, width: usize) -> Tensor {
        let mut t = Tensor::zeros(channels, height, width);
        self.fill_normal(t.data_mut());
        t
    }

    pub fn gaussian_like(&mut self, like: &Tensor) -> Tensor {
        let [c, h, w] = like.shape();
        self.gaussian(c, h, w)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}
