//! Noise-prediction models.
//!
//! [`Denoiser`] is the contract every sampler consumes: predict the noise in `x_t`.
//! Two analytic implementations serve as oracles ([`ConstantDenoiser`],
//! [`GaussianAnalyticDenoiser`]); [`AffineDenoiser`] is the smallest trainable model.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::farm::TrainingConfig;
use crate::io::{Bundle, RawTensor};
use crate::optim::Adam;
use crate::rng::RandomStream;
use crate::schedule::{forward_marginal, NoiseSchedule};
use crate::tensor::Tensor;

pub trait Denoiser: Send + Sync {
    /// Predicted noise `ε̂(x_t, t)`; same shape as `x_t`, deterministic.
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// `x̂₀ = (x_t − sqrt(1 − ᾱ_t)·ε̂) / sqrt(ᾱ_t)`, for `t` in `1..=T`.
pub fn x0_from_eps(sched: &NoiseSchedule, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    x_t.lincomb(inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// Denoiser whose clean estimate is always `x0`.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    sched: NoiseSchedule,
    x0: Tensor,
}

pub fn constant_denoiser(sched: &NoiseSchedule, x0_fixed: Tensor) -> ConstantDenoiser {
    ConstantDenoiser {
        sched: sched.clone(),
        x0: x0_fixed,
    }
}

impl Denoiser for ConstantDenoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.sched.check_t(t, 1)?;
        let ab = self.sched.alpha_bar(t);
        let inv = 1.0 / (1.0 - ab).sqrt();
        x_t.lincomb(inv, &self.x0, -ab.sqrt() * inv)
    }
}

/// Per-pixel Gaussian clean-data distribution `x₀ ~ N(mu0, s0sq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    pub mu0: Tensor,
    pub s0sq: Tensor,
}

impl GaussianWorld {
    pub fn new(mu0: Tensor, s0sq: Tensor) -> Result<Self> {
        mu0.ensure_same_shape(&s0sq)?;
        if s0sq.data().iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::InvalidRange("s0sq must be positive".into()));
        }
        Ok(Self { mu0, s0sq })
    }

    pub fn uniform(channels: usize, height: usize, width: usize, mu0: f64, s0sq: f64) -> Result<Self> {
        Self::new(
            Tensor::filled(channels, height, width, mu0),
            Tensor::filled(channels, height, width, s0sq),
        )
    }

    pub fn sample(&self, rng: &mut RandomStream) -> Tensor {
        let eps = rng.gaussian_like(&self.mu0);
        let mut out = self.mu0.clone();
        for ((o, e), v) in out.data_mut().iter_mut().zip(eps.data()).zip(self.s0sq.data()) {
            *o += v.sqrt() * e;
        }
        out
    }
}

/// Exact posterior mean `E[x₀ | x_t]` for a [`GaussianWorld`].
#[derive(Debug, Clone)]
pub struct GaussianAnalyticDenoiser {
    world: GaussianWorld,
    sched: NoiseSchedule,
}

pub fn gaussian_analytic_denoiser(world: GaussianWorld, sched: &NoiseSchedule) -> GaussianAnalyticDenoiser {
    GaussianAnalyticDenoiser {
        world,
        sched: sched.clone(),
    }
}

impl GaussianAnalyticDenoiser {
    /// `(sqrt(ᾱ)·s²·x_t + (1 − ᾱ)·μ) / (ᾱ·s² + 1 − ᾱ)`; valid for `t = 0` too.
    pub fn posterior_mean(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.sched.check_t(t, 0)?;
        x_t.ensure_same_shape(&self.world.mu0)?;
        Ok(posterior_mean_at(self.sched.alpha_bar(t), x_t, &self.world))
    }

    pub fn world(&self) -> &GaussianWorld {
        &self.world
    }
}

fn posterior_mean_at(ab: f64, x_t: &Tensor, world: &GaussianWorld) -> Tensor {
    let sa = ab.sqrt();
    let mut out = x_t.clone();
    for ((o, mu), s2) in out
        .data_mut()
        .iter_mut()
        .zip(world.mu0.data())
        .zip(world.s0sq.data())
    {
        *o = (sa * s2 * *o + (1.0 - ab) * mu) / (ab * s2 + 1.0 - ab);
    }
    out
}

impl Denoiser for GaussianAnalyticDenoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.sched.check_t(t, 1)?;
        x_t.ensure_same_shape(&self.world.mu0)?;
        let ab = self.sched.alpha_bar(t);
        let x0 = posterior_mean_at(ab, x_t, &self.world);
        let inv = 1.0 / (1.0 - ab).sqrt();
        x_t.lincomb(inv, &x0, -ab.sqrt() * inv)
    }
}

/// Counts `predict_eps` calls on the wrapped denoiser.
pub struct CallCounter<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
}

impl<'a> CallCounter<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl Denoiser for CallCounter<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_eps(x_t, t)
    }
}

/// `ε̂[p] = w[p]·x_t[p] + b[p] + c[t]`: per-pixel affine map with a per-timestep bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDenoiser {
    shape: [usize; 3],
    weight: Vec<f64>,
    bias: Vec<f64>,
    /// Indexed by timestep; slot 0 unused.
    step_bias: Vec<f64>,
}

/// One training example with its noise draw fixed.
#[derive(Debug, Clone)]
pub struct NoisedSample {
    pub x0: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first and last `frac` of iterations.
    pub fn head_tail_means(&self, frac: f64) -> (f64, f64) {
        let n = self.losses.len();
        let k = ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..k.min(n)]), mean(&self.losses[n.saturating_sub(k)..]))
    }
}

impl AffineDenoiser {
    pub fn zeros(shape: [usize; 3], steps: usize) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            weight: vec![0.0; n],
            bias: vec![0.0; n],
            step_bias: vec![0.0; steps + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.step_bias.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len() + self.step_bias.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.weight);
        p.extend_from_slice(&self.bias);
        p.extend_from_slice(&self.step_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let n = self.weight.len();
        self.weight.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..2 * n]);
        self.step_bias.copy_from_slice(&p[2 * n..]);
    }

    fn check_input(&self, x_t: &Tensor, t: usize) -> Result<()> {
        if x_t.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                actual: x_t.shape().to_vec(),
            });
        }
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Noise-prediction loss `λ₁·mean((ε − ε̂(x_t, t))²)` over a batch, and its gradient
    /// with respect to [`params`](Self::params).
    pub fn loss_and_grad(
        &self,
        sched: &NoiseSchedule,
        batch: &[NoisedSample],
        lambda1: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let n = self.weight.len();
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        let scale = lambda1 / (batch.len() * n) as f64;
        for s in batch {
            let x_t = forward_marginal(sched, &s.x0, s.t, &s.eps)?;
            let eps_hat = self.predict_eps(&x_t, s.t)?;
            for p in 0..n {
                let r = eps_hat.data()[p] - s.eps.data()[p];
                loss += r * r;
                let g = 2.0 * scale * r;
                grad[p] += g * x_t.data()[p];
                grad[n + p] += g;
                grad[2 * n + s.t] += g;
            }
        }
        Ok((loss * scale, grad))
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new("affine-denoiser");
        b.push("weight", RawTensor::from_f64(&self.shape, &self.weight));
        b.push("bias", RawTensor::from_f64(&self.shape, &self.bias));
        b.push(
            "step_bias",
            RawTensor::from_f64(&[self.step_bias.len()], &self.step_bias),
        );
        b
    }

    pub fn from_bundle(b: &Bundle, path: &Path) -> Result<Self> {
        if b.kind != "affine-denoiser" {
            return Err(Error::format(path, format!("expected affine-denoiser, got {}", b.kind)));
        }
        let get = |name: &str| {
            b.get(name)
                .ok_or_else(|| Error::format(path, format!("missing section {name}")))
        };
        let w = get("weight")?;
        let shape: [usize; 3] = w
            .dims_usize()
            .try_into()
            .map_err(|_| Error::format(path, "weight must be rank 3"))?;
        let bias = get("bias")?;
        let step = get("step_bias")?;
        if bias.dims != w.dims || step.dims.len() != 1 || step.dims[0] < 2 {
            return Err(Error::format(path, "inconsistent affine-denoiser sections"));
        }
        Ok(Self {
            shape,
            weight: w.to_f64(),
            bias: bias.to_f64(),
            step_bias: step.to_f64(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bundle(&Bundle::load(path)?, path)
    }
}

impl Denoiser for AffineDenoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t, t)?;
        let c = self.step_bias[t];
        let mut out = x_t.clone();
        for ((o, w), b) in out.data_mut().iter_mut().zip(&self.weight).zip(&self.bias) {
            *o = w * *o + b + c;
        }
        Ok(out)
    }
}

/// Train an [`AffineDenoiser`] on the noise-prediction objective with Adam,
/// `t ~ Uniform{1..T}` and fresh `ε` per sample.
pub fn tiny_denoiser_train(
    dataset: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
) -> Result<(AffineDenoiser, TrainLog)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    for x in dataset {
        first.ensure_same_shape(x)?;
    }
    cfg.validate()?;
    let mut model = AffineDenoiser::zeros(first.shape(), sched.steps());
    let mut params = model.params();
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut rng = RandomStream::new(cfg.seed, 0);
    let mut log = TrainLog::default();
    for iteration in 0..cfg.iters {
        let batch: Vec<NoisedSample> = (0..cfg.batch)
            .map(|_| {
                let x0 = dataset[rng.uniform_int(0, dataset.len() - 1)].clone();
                let t = rng.uniform_int(1, sched.steps());
                let eps = rng.gaussian_like(&x0);
                NoisedSample { x0, t, eps }
            })
            .collect();
        let (loss, grad) = model.loss_and_grad(sched, &batch, cfg.lambda1)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                param_norm: params.iter().map(|p| p * p).sum::<f64>().sqrt(),
            });
        }
        log.losses.push(loss);
        opt.update(&mut params, &grad);
        model.set_params(&params);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;

    fn three_step() -> NoiseSchedule {
        build_linear_schedule(3, 0.1, 0.3).unwrap()
    }

    fn default_schedule() -> NoiseSchedule {
        build_linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn x0_from_eps_examples() {
        let s = three_step();
        let x = Tensor::filled(1, 1, 1, 0.848528137423857);
        let zero = Tensor::zeros(1, 1, 1);
        let x0 = x0_from_eps(&s, &x, 2, &zero).unwrap();
        assert!((x0.data()[0] - 1.0).abs() < 1e-12);
        assert!(x0_from_eps(&s, &x, 0, &zero).is_err());
        let x0 = x0_from_eps(&s, &x, 3, &zero).unwrap();
        assert_eq!(x0.data()[0], x.data()[0] / s.alpha_bar(3).sqrt());
    }

    #[test]
    fn x0_from_eps_inverts_forward_marginal() {
        let s = default_schedule();
        let mut r = RandomStream::new(2, 0);
        for t in [1, 2, 10, 500, 999, 1000] {
            let x0 = r.gaussian(2, 3, 3);
            let eps = r.gaussian(2, 3, 3);
            let x_t = forward_marginal(&s, &x0, t, &eps).unwrap();
            let back = x0_from_eps(&s, &x_t, t, &eps).unwrap();
            let tol = 1e-12 / s.alpha_bar(t).sqrt();
            assert!(back.max_abs_diff(&x0).unwrap() <= tol, "t={t}");
        }
    }

    #[test]
    fn constant_denoiser_recovers_fixed_estimate() {
        let s = default_schedule();
        let mut r = RandomStream::new(3, 0);
        let fixed = r.gaussian(1, 4, 4);
        let d = constant_denoiser(&s, fixed.clone());
        for _ in 0..20 {
            let t = r.uniform_int(1, 1000);
            let x_t = r.gaussian(1, 4, 4);
            let eps = d.predict_eps(&x_t, t).unwrap();
            let back = x0_from_eps(&s, &x_t, t, &eps).unwrap();
            assert!(back.max_abs_diff(&fixed).unwrap() < 1e-9 / s.alpha_bar(t).sqrt());
        }
        let x_t = fixed.map(|v| v * s.alpha_bar(40).sqrt());
        let eps = d.predict_eps(&x_t, 40).unwrap();
        assert!(eps.data().iter().all(|e| e.abs() < 1e-14));
        assert!(d.predict_eps(&x_t, 1001).is_err());
        assert!(d.predict_eps(&x_t, 0).is_err());
    }

    #[test]
    fn gaussian_posterior_mean_examples() {
        // ᾱ = 0.5 at t = 1 for a single-step schedule with β = 0.5
        let s = NoiseSchedule::from_betas(&[0.5]).unwrap();
        let world = GaussianWorld::uniform(1, 1, 1, 0.0, 1.0).unwrap();
        let d = gaussian_analytic_denoiser(world, &s);
        let m = d.posterior_mean(&Tensor::filled(1, 1, 1, 1.0), 1).unwrap();
        assert!((m.data()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        // t = 0: ᾱ = 1, the estimate is x_t itself
        let world = GaussianWorld::uniform(1, 1, 1, 0.3, 0.04).unwrap();
        let d = gaussian_analytic_denoiser(world, &s);
        let m = d.posterior_mean(&Tensor::filled(1, 1, 1, 1.7), 0).unwrap();
        assert!((m.data()[0] - 1.7).abs() < 1e-14);

        assert!(GaussianWorld::uniform(1, 1, 1, 0.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_eps_consistent_with_posterior_mean() {
        let s = default_schedule();
        let world = GaussianWorld::uniform(1, 2, 2, 0.3, 0.04).unwrap();
        let d = gaussian_analytic_denoiser(world, &s);
        let mut r = RandomStream::new(4, 0);
        for t in [1, 50, 600] {
            let x_t = r.gaussian(1, 2, 2);
            let eps = d.predict_eps(&x_t, t).unwrap();
            let x0 = x0_from_eps(&s, &x_t, t, &eps).unwrap();
            let m = d.posterior_mean(&x_t, t).unwrap();
            assert!(x0.max_abs_diff(&m).unwrap() < 1e-10);
        }
        assert!(d.predict_eps(&Tensor::zeros(1, 3, 3), 5).is_err());
    }

    #[test]
    fn clean_estimate_varies_slowly_at_large_t() {
        // Average |x̂₀(t) − x̂₀(t−1)| along forward-noised trajectories: the top quartile
        // of timesteps must move less than the bottom quartile.
        let s = default_schedule();
        let world = GaussianWorld::uniform(1, 1, 1, 0.3, 0.04).unwrap();
        let d = gaussian_analytic_denoiser(world.clone(), &s);
        let mut r = RandomStream::new(8, 0);
        let (mut top, mut bottom) = (0.0, 0.0);
        for _ in 0..100 {
            // one trajectory: x₀ then q(x_t | x_{t−1}) steps
            let mut x = world.sample(&mut r);
            let mut prev_est: Option<f64> = None;
            for t in 1..=1000 {
                let b = s.beta(t);
                x = x.map(|v| (1.0 - b).sqrt() * v);
                let n = r.normal();
                x.data_mut()[0] += b.sqrt() * n;
                let est = d.posterior_mean(&x, t).unwrap().data()[0];
                if let Some(p) = prev_est {
                    let delta = (est - p).abs();
                    if t > 750 {
                        top += delta;
                    } else if t <= 250 {
                        bottom += delta;
                    }
                }
                prev_est = Some(est);
            }
        }
        assert!(top < bottom, "top={top} bottom={bottom}");
    }

    #[test]
    fn call_counter_counts() {
        let s = three_step();
        let d = constant_denoiser(&s, Tensor::zeros(1, 1, 1));
        let c = CallCounter::new(&d);
        for t in 1..=3 {
            c.predict_eps(&Tensor::zeros(1, 1, 1), t).unwrap();
        }
        assert_eq!(c.calls(), 3);
        c.reset();
        assert_eq!(c.calls(), 0);
    }

    fn fixed_batch(s: &NoiseSchedule, seed: u64) -> Vec<NoisedSample> {
        let mut r = RandomStream::new(seed, 0);
        (0..4)
            .map(|_| NoisedSample {
                x0: r.gaussian(1, 3, 3),
                t: r.uniform_int(1, s.steps()),
                eps: r.gaussian(1, 3, 3),
            })
            .collect()
    }

    #[test]
    fn zero_init_loss_is_unit_noise_energy() {
        let s = default_schedule();
        let m = AffineDenoiser::zeros([1, 8, 8], 1000);
        let mut r = RandomStream::new(6, 0);
        let batch: Vec<NoisedSample> = (0..200)
            .map(|_| NoisedSample {
                x0: Tensor::filled(1, 8, 8, 0.5),
                t: r.uniform_int(1, 1000),
                eps: r.gaussian(1, 8, 8),
            })
            .collect();
        let (loss, _) = m.loss_and_grad(&s, &batch, 1.0).unwrap();
        // 12 800 unit-normal squares: 4 standard errors is ~0.05
        assert!((loss - 1.0).abs() < 0.05, "loss={loss}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = default_schedule();
        let batch = fixed_batch(&s, 10);
        let mut m = AffineDenoiser::zeros([1, 3, 3], 1000);
        let mut r = RandomStream::new(12, 0);
        let p0: Vec<f64> = (0..m.num_params()).map(|_| 0.3 * r.normal()).collect();
        m.set_params(&p0);
        let (_, grad) = m.loss_and_grad(&s, &batch, 1.0).unwrap();
        // coordinates that actually receive gradient: pixel weights/biases plus the
        // step biases of the batch's timesteps
        let mut coords: Vec<usize> = (0..18).collect();
        coords.extend(batch.iter().map(|b| 18 + b.t));
        let h = 1e-5;
        let mut probe = m.clone();
        for &i in coords.iter().take(20) {
            let mut p = p0.clone();
            p[i] += h;
            probe.set_params(&p);
            let up = probe.loss_and_grad(&s, &batch, 1.0).unwrap().0;
            p[i] -= 2.0 * h;
            probe.set_params(&p);
            let down = probe.loss_and_grad(&s, &batch, 1.0).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "coord {i}: fd={fd} analytic={}", grad[i]);
        }
    }

    #[test]
    fn training_on_constant_images_halves_loss() {
        let s = default_schedule();
        let data = vec![Tensor::filled(1, 4, 4, 0.5), Tensor::filled(1, 4, 4, 0.5)];
        let cfg = TrainingConfig {
            lr: 1e-2,
            iters: 2000,
            seed: 3,
            ..TrainingConfig::default()
        };
        let (model, log) = tiny_denoiser_train(&data, &s, &cfg).unwrap();
        let (head, tail) = log.head_tail_means(0.1);
        assert!((log.losses[0] - 1.0).abs() < 0.5);
        assert!(tail < head);
        assert!(tail < 0.5 * log.losses[..50].iter().sum::<f64>() / 50.0, "head={head} tail={tail}");

        let (again, _) = tiny_denoiser_train(&data, &s, &cfg).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn training_rejects_empty_and_non_finite() {
        let s = default_schedule();
        let cfg = TrainingConfig::default();
        assert!(matches!(tiny_denoiser_train(&[], &s, &cfg), Err(Error::EmptyDataset)));
        let bad = vec![Tensor::filled(1, 2, 2, f64::NAN)];
        let cfg = TrainingConfig {
            iters: 3,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            tiny_denoiser_train(&bad, &s, &cfg),
            Err(Error::NonFiniteLoss { iteration: 0, .. })
        ));
    }

    #[test]
    fn affine_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.afb");
        let mut m = AffineDenoiser::zeros([1, 2, 2], 10);
        let params: Vec<f64> = (0..m.num_params()).map(|i| i as f64 * 0.25).collect();
        m.set_params(&params);
        m.save(&p).unwrap();
        assert_eq!(AffineDenoiser::load(&p).unwrap(), m);
    }
}
