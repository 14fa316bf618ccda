//! Aggregated multi-step reverse kernels.
//!
//! With the clean estimate `x̂₀` held fixed, each reverse step is affine–Gaussian,
//! `x_{i-1} = B_i·x_i + A_i·x̂₀ + N(0, σ_i²)`, so a run of steps `t_s → t_e` collapses to
//!
//! ```text
//! x_{t_e} = π·x_{t_s} + s·x̂₀ + N(0, v)
//! π = Π_{i=t_e+1}^{t_s} B_i
//! s = Σ_{i=t_e+1}^{t_s} A_i · Π_{j=t_e+1}^{i-1} B_j
//! v = Σ_{i=t_e+1}^{t_s} σ_i² · (Π_{j=t_e+1}^{i-1} B_j)²
//! ```
//!
//! The B-products in `s` and `v` run over the steps applied *after* step `i`
//! (indices below `i`). Attaching them to the steps above `i` instead
//! (`Π_{j=i+1}^{t_s} B_j`) breaks both aggregated identities
//!
//! ```text
//! π·sqrt(ᾱ_{t_s}) + s = sqrt(ᾱ_{t_e})
//! π²·(1 − ᾱ_{t_s}) + v = 1 − ᾱ_{t_e}
//! ```
//!
//! which is how the ordering here was pinned down: [`aggregate_bruteforce`] folds the
//! steps one at a time and is the reference, [`aggregate_segment`] is the single-pass
//! closed form used for precomputation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentKernel {
    pub t_s: usize,
    pub t_e: usize,
    /// Coefficient on `x_{t_s}`.
    pub pi: f64,
    /// Coefficient on `x̂₀`.
    pub sigma_coef: f64,
    /// Injected Gaussian variance.
    pub var: f64,
}

impl SegmentKernel {
    pub fn identity(t: usize) -> Self {
        Self {
            t_s: t,
            t_e: t,
            pi: 1.0,
            sigma_coef: 0.0,
            var: 0.0,
        }
    }

    /// Residual of `π·sqrt(ᾱ_{t_s}) + s − sqrt(ᾱ_{t_e})`.
    pub fn telescoping_residual(&self, sched: &NoiseSchedule) -> f64 {
        self.pi * sched.alpha_bar(self.t_s).sqrt() + self.sigma_coef - sched.alpha_bar(self.t_e).sqrt()
    }

    /// Residual of `π²·(1 − ᾱ_{t_s}) + v − (1 − ᾱ_{t_e})`.
    pub fn marginal_residual(&self, sched: &NoiseSchedule) -> f64 {
        self.pi * self.pi * (1.0 - sched.alpha_bar(self.t_s)) + self.var
            - (1.0 - sched.alpha_bar(self.t_e))
    }
}

fn check_segment(sched: &NoiseSchedule, t_s: usize, t_e: usize) -> Result<()> {
    if t_s > sched.steps() || t_e > t_s {
        return Err(Error::InvalidRange(format!(
            "segment {t_s}->{t_e} needs 0 <= t_e <= t_s <= {}",
            sched.steps()
        )));
    }
    Ok(())
}

/// Closed-form aggregate over `t_s → t_e`, one ascending pass with a running
/// product of the B coefficients below the current step.
pub fn aggregate_segment(sched: &NoiseSchedule, t_s: usize, t_e: usize) -> Result<SegmentKernel> {
    check_segment(sched, t_s, t_e)?;
    let mut below = 1.0;
    let mut sigma_coef = 0.0;
    let mut var = 0.0;
    for i in t_e + 1..=t_s {
        let c = sched.coefficients_unchecked(i);
        sigma_coef += c.a * below;
        var += c.sigma2 * below * below;
        below *= c.b;
    }
    Ok(SegmentKernel {
        t_s,
        t_e,
        pi: below,
        sigma_coef,
        var,
    })
}

/// Reference composition: start from the identity at `t_s` and apply one posterior
/// step at a time, `x ← B·x + A·x̂₀ + N(0, σ²)`, tracking the affine map and variance.
pub fn aggregate_bruteforce(sched: &NoiseSchedule, t_s: usize, t_e: usize) -> Result<SegmentKernel> {
    check_segment(sched, t_s, t_e)?;
    let mut k = SegmentKernel::identity(t_s);
    for i in (t_e + 1..=t_s).rev() {
        let c = sched.posterior_coefficients(i)?;
        k.pi *= c.b;
        k.sigma_coef = c.b * k.sigma_coef + c.a;
        k.var = c.b * c.b * k.var + c.sigma2;
        k.t_e = i - 1;
    }
    Ok(k)
}

/// Chain `inner` (`t_s → t_m`) followed by `outer` (`t_m → t_e`).
pub fn compose_kernels(outer: &SegmentKernel, inner: &SegmentKernel) -> Result<SegmentKernel> {
    if outer.t_s != inner.t_e {
        return Err(Error::NonAdjacent {
            outer_start: outer.t_s,
            inner_end: inner.t_e,
        });
    }
    Ok(SegmentKernel {
        t_s: inner.t_s,
        t_e: outer.t_e,
        pi: outer.pi * inner.pi,
        sigma_coef: outer.pi * inner.sigma_coef + outer.sigma_coef,
        var: outer.pi * outer.pi * inner.var + outer.var,
    })
}

/// Draw `x_{t_e} = π·x_{t_s} + s·x̂₀ + sqrt(v)·ε`. No noise is consumed when `v = 0`.
pub fn apply_kernel(
    k: &SegmentKernel,
    x_ts: &Tensor,
    x0_hat: &Tensor,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    let mut out = x_ts.zip_map(x0_hat, |x, x0| k.pi * x + k.sigma_coef * x0)?;
    if k.var > 0.0 {
        let sd = k.var.sqrt();
        for v in out.data_mut() {
            *v += sd * rng.normal();
        }
    }
    Ok(out)
}

/// Strictly increasing timesteps `t_1 < … < t_K = T`. Segments run between
/// consecutive boundaries; `t_1` is where fine refinement takes over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySchedule {
    boundaries: Vec<usize>,
}

impl BoundarySchedule {
    pub fn from_list(boundaries: Vec<usize>, steps: usize) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::InvalidBoundaries("need at least two boundaries".into()));
        }
        if boundaries[0] < 1 {
            return Err(Error::InvalidBoundaries("t_1 must be >= 1".into()));
        }
        if *boundaries.last().unwrap() != steps {
            return Err(Error::InvalidBoundaries(format!(
                "last boundary must equal T = {steps}"
            )));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidBoundaries("boundaries must be strictly increasing".into()));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn fine_cutoff(&self) -> usize {
        self.boundaries[0]
    }

    pub fn last(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    /// Segments `(t_s, t_e)` in sampling order, from `T` downwards.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.boundaries.windows(2).rev().map(|w| (w[1], w[0]))
    }
}

/// `K` boundaries spaced uniformly in timestep over `[t1, T]`, each rounded half-up.
///
/// Rounding is done in integer arithmetic: `t1 + floor((2·(T−t1)·k + (K−1)) / (2·(K−1)))`.
pub fn make_boundary_schedule(steps: usize, count: usize, t1: usize) -> Result<BoundarySchedule> {
    if t1 < 1 || t1 >= steps {
        return Err(Error::InvalidBoundaries(format!(
            "need 1 <= t1 < T, got t1 = {t1}, T = {steps}"
        )));
    }
    if count < 2 {
        return Err(Error::InvalidBoundaries(format!(
            "need K >= 2 boundaries to span [t1, T], got {count}"
        )));
    }
    if count > steps - t1 + 1 {
        return Err(Error::InvalidBoundaries(format!(
            "K = {count} exceeds the {} timesteps in [{t1}, {steps}]",
            steps - t1 + 1
        )));
    }
    let span = (steps - t1) as u64;
    let denom = (count - 1) as u64;
    let mut boundaries: Vec<usize> = (0..count as u64)
        .map(|k| t1 + ((2 * span * k + denom) / (2 * denom)) as usize)
        .collect();
    boundaries.dedup();
    BoundarySchedule::from_list(boundaries, steps)
}

/// Precomputed kernels for every segment of a boundary schedule.
#[derive(Debug, Clone)]
pub struct KernelTable {
    kernels: BTreeMap<(usize, usize), SegmentKernel>,
}

impl KernelTable {
    pub fn build(sched: &NoiseSchedule, boundaries: &BoundarySchedule) -> Result<Self> {
        if boundaries.last() != sched.steps() {
            return Err(Error::InvalidBoundaries(format!(
                "boundary schedule ends at {} but T = {}",
                boundaries.last(),
                sched.steps()
            )));
        }
        let mut kernels = BTreeMap::new();
        for (t_s, t_e) in boundaries.segments() {
            kernels.insert((t_s, t_e), aggregate_segment(sched, t_s, t_e)?);
        }
        Ok(Self { kernels })
    }

    pub fn get(&self, t_s: usize, t_e: usize) -> Option<&SegmentKernel> {
        self.kernels.get(&(t_s, t_e))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SegmentKernel> {
        self.kernels.values()
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}
