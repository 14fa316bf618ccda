//! Discrete noise schedule and one-step posterior coefficients.
//!
//! Timesteps run `1..=T`; index 0 is the clean sample with `ᾱ₀ = 1`. The posterior
//! `q(x_{t-1} | x_t, x₀) = N(A_t·x₀ + B_t·x_t, σ_t²)` uses
//!
//! ```text
//! A_t  = sqrt(ᾱ_{t-1})·β_t / (1 − ᾱ_t)
//! B_t  = sqrt(α_t)·(1 − ᾱ_{t-1}) / (1 − ᾱ_t)
//! σ_t² = (1 − ᾱ_{t-1}) / (1 − ᾱ_t) · β_t
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable β/α/ᾱ tables. All three vectors have length `T + 1`; slot 0 of
/// `beta`/`alpha` is unused padding (0 and 1) so that indices match timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    /// Drift on the clean estimate.
    pub a: f64,
    /// Drift on `x_t`.
    pub b: f64,
    pub sigma2: f64,
}

impl NoiseSchedule {
    /// Schedule from explicit `β_1..β_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs T >= 1".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::InvalidRange(format!(
                "beta[{}] = {b} outside (0, 1)",
                i + 1
            )));
        }
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for &b in betas {
            let a = 1.0 - b;
            let prev = *alpha_bar.last().unwrap();
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Posterior coefficients at `t` in `1..=T`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<StepCoefficients> {
        self.check_t(t, 1)?;
        Ok(self.coefficients_unchecked(t))
    }

    pub(crate) fn coefficients_unchecked(&self, t: usize) -> StepCoefficients {
        if t == 1 {
            // ᾱ₀ = 1 makes the last step deterministic; the closed forms only reach
            // these values up to rounding.
            return StepCoefficients {
                t,
                a: 1.0,
                b: 0.0,
                sigma2: 0.0,
            };
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t];
        let denom = 1.0 - ab;
        StepCoefficients {
            t,
            a: ab_prev.sqrt() * beta / denom,
            b: self.alpha[t].sqrt() * (1.0 - ab_prev) / denom,
            sigma2: (1.0 - ab_prev) / denom * beta,
        }
    }
}

/// β linearly interpolated from `beta_start` at t=1 to `beta_end` at t=T.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidRange("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(&betas)
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_marginal(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar(t);
    if t == 0 {
        x0.ensure_same_shape(eps)?;
        return Ok(x0.clone());
    }
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize) -> Result<StepCoefficients> {
    sched.posterior_coefficients(t)
}
