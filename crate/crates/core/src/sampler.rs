//! Reverse samplers: the full per-step chain and the coarse-to-fine segment sampler
//! with foreground/background fusion.

use crate::denoiser::{x0_from_eps, Denoiser};
use crate::error::{Error, Result};
use crate::farm::{farm_inject, FarmParams};
use crate::kernel::{apply_kernel, BoundarySchedule, KernelTable};
use crate::mask::AnomalyMask;
use crate::rng::RandomStream;
use crate::schedule::{forward_marginal, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub boundaries: BoundarySchedule,
    pub farm_enabled: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(boundaries: BoundarySchedule, farm_enabled: bool, seed: u64) -> Self {
        Self {
            boundaries,
            farm_enabled,
            seed,
        }
    }

    pub fn fine_cutoff(&self) -> usize {
        self.boundaries.fine_cutoff()
    }

    /// Denoiser evaluations per synthesis: one per segment plus one per fine step.
    pub fn denoiser_calls(&self) -> usize {
        self.boundaries.len() - 1 + self.fine_cutoff()
    }
}

/// Clean background, its working-space copy and the anomaly mask. Pixel space is the
/// working space here, so the two images usually coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisInput {
    pub background_full: Tensor,
    pub background_latent: Tensor,
    pub mask: AnomalyMask,
}

impl SynthesisInput {
    pub fn new(background: Tensor, mask: AnomalyMask) -> Result<Self> {
        mask.ensure_matches(&background)?;
        Ok(Self {
            background_latent: background.clone(),
            background_full: background,
            mask,
        })
    }

    fn validate(&self) -> Result<()> {
        self.mask.ensure_matches(&self.background_full)?;
        self.mask.ensure_matches(&self.background_latent)
    }
}

/// Elementwise select: masked pixels from `fg`, the rest from `bg`. Values are copied,
/// never blended, so both sides are reproduced bit for bit.
fn select(m: &AnomalyMask, fg: &Tensor, bg: &Tensor) -> Result<Tensor> {
    fg.ensure_same_shape(bg)?;
    m.ensure_matches(fg)?;
    let plane = m.height() * m.width();
    let data = fg
        .data()
        .iter()
        .zip(bg.data())
        .enumerate()
        .map(|(k, (f, b))| if m.data()[k % plane] == 1 { *f } else { *b })
        .collect();
    Tensor::from_vec(fg.channels(), fg.height(), fg.width(), data)
}

/// `(M⊙x₀, (1−M)⊙x₀)`.
pub fn decompose(x0: &Tensor, m: &AnomalyMask) -> Result<(Tensor, Tensor)> {
    let zero = Tensor::zeros(x0.channels(), x0.height(), x0.width());
    Ok((select(m, x0, &zero)?, select(m, &zero, x0)?))
}

/// `M⊙x_R + (1−M)⊙x_bg`.
pub fn fuse_foreground(x_r: &Tensor, x_bg: &Tensor, m: &AnomalyMask) -> Result<Tensor> {
    select(m, x_r, x_bg)
}

/// One posterior step `x_{t−1} ~ N(A_t·x̂₀ + B_t·x_t, σ_t²·I)` with `x̂₀` predicted at `t`.
pub fn posterior_step(
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    x_t: &Tensor,
    t: usize,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    let c = sched.posterior_coefficients(t)?;
    let eps_hat = denoiser.predict_eps(x_t, t)?;
    let x0_hat = x0_from_eps(sched, x_t, t, &eps_hat)?;
    let mut out = x0_hat.zip_map(x_t, |x0, x| c.a * x0 + c.b * x)?;
    if c.sigma2 > 0.0 {
        let sd = c.sigma2.sqrt();
        for v in out.data_mut() {
            *v += sd * rng.normal();
        }
    }
    Ok(out)
}

/// Per-step posterior sampling from `t1` down to `0`.
pub fn fine_refine(
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    x_t1: &Tensor,
    t1: usize,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    sched.check_t(t1, 1)?;
    let mut x = x_t1.clone();
    for t in (1..=t1).rev() {
        x = posterior_step(sched, denoiser, &x, t, rng)?;
    }
    Ok(x)
}

/// The full `T`-step reference chain.
pub fn ddpm_sample(
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    x_t: &Tensor,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    fine_refine(sched, denoiser, x_t, sched.steps(), rng)
}

/// Coarse-to-fine synthesis. See [`aias_sample_traced`].
pub fn aias_sample(
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    farm: Option<&FarmParams>,
    input: &SynthesisInput,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    aias_sample_traced(sched, cfg, denoiser, farm, input, rng, |_, _| {})
}

/// Coarse-to-fine synthesis, calling `observe(t_e, x_{t_e})` with the fused state after
/// every segment.
///
/// ```text
/// x_T ~ N(0, I)
/// for (t_s, t_e) in segments:
///     x̂₀      = x0_from_eps(x_{t_s}, ε_θ(x_{t_s}, t_s))
///     x_{t_e} ~ N(π·x_{t_s} + s·x̂₀, v·I)
///     bg      ~ N(sqrt(ᾱ_{t_e})·x₀^bg, (1 − ᾱ_{t_e})·I)
///     x_{t_e} = M⊙farm_inject(x_{t_e}) + (1 − M)⊙bg
/// x₀ = fine_refine(x_{t_1}, t_1)
/// return M⊙x₀ + (1 − M)⊙x_full^bg
/// ```
pub fn aias_sample_traced(
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    denoiser: &dyn Denoiser,
    farm: Option<&FarmParams>,
    input: &SynthesisInput,
    rng: &mut RandomStream,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    input.validate()?;
    let farm = match (cfg.farm_enabled, farm) {
        (true, None) => return Err(Error::Config("FARM enabled but no parameters supplied".into())),
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    let kernels = KernelTable::build(sched, &cfg.boundaries)?;
    let bg0 = &input.background_latent;
    let m = &input.mask;

    let mut x = rng.gaussian_like(bg0);
    for (t_s, t_e) in cfg.boundaries.segments() {
        let k = kernels.get(t_s, t_e).expect("table covers every segment");
        let eps_hat = denoiser.predict_eps(&x, t_s)?;
        let x0_hat = x0_from_eps(sched, &x, t_s, &eps_hat)?;
        let x_te = apply_kernel(k, &x, &x0_hat, rng)?;
        let bg_noise = rng.gaussian_like(bg0);
        let x_bg = forward_marginal(sched, bg0, t_e, &bg_noise)?;
        let x_r = match farm {
            Some(p) => farm_inject(&x_te, m, t_e, p, sched, rng)?,
            None => x_te,
        };
        x = fuse_foreground(&x_r, &x_bg, m)?;
        observe(t_e, &x);
    }
    let x0 = fine_refine(sched, denoiser, &x, cfg.fine_cutoff(), rng)?;
    fuse_foreground(&x0, &input.background_full, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{constant_denoiser, CallCounter};
    use crate::farm::{FarmDims, FarmParams};
    use crate::kernel::make_boundary_schedule;
    use crate::schedule::build_linear_schedule;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        build_linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    fn random_mask(r: &mut RandomStream, h: usize, w: usize) -> AnomalyMask {
        let bits: Vec<u8> = (0..h * w).map(|_| u8::from(r.uniform() < 0.4)).collect();
        AnomalyMask::from_vec(h, w, bits).unwrap()
    }

    #[test]
    fn decompose_examples() {
        let mut r = RandomStream::new(1, 0);
        let x = r.gaussian(2, 3, 3);
        let (fg, bg) = decompose(&x, &AnomalyMask::zeros(3, 3)).unwrap();
        assert!(fg.data().iter().all(|&v| v == 0.0));
        assert_eq!(bg, x);
        let (fg, bg) = decompose(&x, &AnomalyMask::ones(3, 3)).unwrap();
        assert_eq!(fg, x);
        assert!(bg.data().iter().all(|&v| v == 0.0));
        assert!(decompose(&x, &AnomalyMask::ones(3, 4)).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut r = RandomStream::new(2, 0);
        let a = r.gaussian(1, 4, 4);
        let b = r.gaussian(1, 4, 4);
        assert_eq!(fuse_foreground(&a, &b, &AnomalyMask::zeros(4, 4)).unwrap(), b);
        assert_eq!(fuse_foreground(&a, &b, &AnomalyMask::ones(4, 4)).unwrap(), a);
        let m = random_mask(&mut r, 4, 4);
        let once = fuse_foreground(&a, &b, &m).unwrap();
        assert_eq!(fuse_foreground(&once, &b, &m).unwrap(), once);
        assert!(fuse_foreground(&a, &r.gaussian(1, 4, 3), &m).is_err());
    }

    #[test]
    fn single_step_schedule_is_deterministic() {
        let s = NoiseSchedule::from_betas(&[0.3]).unwrap();
        let x0 = Tensor::filled(1, 2, 2, 0.25);
        let den = constant_denoiser(&s, x0.clone());
        let mut r = RandomStream::new(3, 0);
        let pos = r.position();
        let out = ddpm_sample(&s, &den, &r.clone().gaussian(1, 2, 2), &mut r).unwrap();
        assert_eq!(r.position(), pos);
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-15);
    }

    #[test]
    fn constant_denoiser_chain_lands_on_target() {
        let s = sched();
        let mut r = RandomStream::new(4, 0);
        let x0 = r.gaussian(1, 3, 3);
        let den = constant_denoiser(&s, x0.clone());
        let out = ddpm_sample(&s, &den, &r.gaussian(1, 3, 3), &mut r).unwrap();
        // the final step returns x̂₀ as recovered from ε̂; only rounding separates it from x₀
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-9);
    }

    #[test]
    fn fine_refine_from_one_is_single_deterministic_step() {
        let s = sched();
        let mut r = RandomStream::new(5, 0);
        let x0 = r.gaussian(1, 3, 3);
        let base = constant_denoiser(&s, x0.clone());
        let den = CallCounter::new(&base);
        let x1 = r.gaussian(1, 3, 3);
        let pos = r.position();
        let out = fine_refine(&s, &den, &x1, 1, &mut r).unwrap();
        assert_eq!(r.position(), pos);
        assert_eq!(den.calls(), 1);
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-12);
        assert!(fine_refine(&s, &den, &x1, 0, &mut r).is_err());
        assert!(fine_refine(&s, &den, &x1, 1001, &mut r).is_err());
    }

    #[test]
    fn fine_refine_is_tail_of_full_chain() {
        let s = sched();
        let mut r = RandomStream::new(6, 0);
        let x0 = r.gaussian(1, 4, 4);
        let den = constant_denoiser(&s, x0);
        let x_t = r.gaussian(1, 4, 4);
        let full = ddpm_sample(&s, &den, &x_t, &mut RandomStream::new(9, 9)).unwrap();
        let mut rng = RandomStream::new(9, 9);
        let mut x = x_t.clone();
        for t in (3..=1000).rev() {
            x = posterior_step(&s, &den, &x, t, &mut rng).unwrap();
        }
        let tail = fine_refine(&s, &den, &x, 2, &mut rng).unwrap();
        assert!(full.data().iter().zip(tail.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_mask_returns_background_bitwise() {
        let s = sched();
        let mut r = RandomStream::new(7, 0);
        let bg = r.gaussian(1, 4, 4);
        let input = SynthesisInput::new(bg.clone(), AnomalyMask::zeros(4, 4)).unwrap();
        let den = constant_denoiser(&s, r.gaussian(1, 4, 4));
        let cfg = SamplerConfig::new(make_boundary_schedule(1000, 10, 2).unwrap(), false, 7);
        let out = aias_sample(&s, &cfg, &den, None, &input, &mut r).unwrap();
        assert!(out.data().iter().zip(bg.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn call_count_matches_boundary_formula() {
        let s = sched();
        let mut r = RandomStream::new(8, 0);
        let input = SynthesisInput::new(r.gaussian(1, 4, 4), random_mask(&mut r, 4, 4)).unwrap();
        let base = constant_denoiser(&s, Tensor::zeros(1, 4, 4));
        for (k, t1) in [(50, 2), (10, 2), (2, 1), (5, 7)] {
            let cfg = SamplerConfig::new(make_boundary_schedule(1000, k, t1).unwrap(), false, 1);
            let den = CallCounter::new(&base);
            aias_sample(&s, &cfg, &den, None, &input, &mut r).unwrap();
            assert_eq!(den.calls(), k - 1 + t1);
            assert_eq!(cfg.denoiser_calls(), k - 1 + t1);
        }
        let cfg = SamplerConfig::new(make_boundary_schedule(1000, 50, 2).unwrap(), false, 1);
        let den = CallCounter::new(&base);
        aias_sample(&s, &cfg, &den, None, &input, &mut r).unwrap();
        assert_eq!(den.calls(), 51);
    }

    #[test]
    fn same_seed_same_synthesis() {
        let s = sched();
        let mut r = RandomStream::new(10, 0);
        let input = SynthesisInput::new(r.gaussian(1, 4, 4), random_mask(&mut r, 4, 4)).unwrap();
        let farm = FarmParams::init(
            FarmDims {
                channels: 1,
                features: 4,
                embed_dim: 8,
            },
            3,
        )
        .unwrap();
        let den = constant_denoiser(&s, Tensor::filled(1, 4, 4, 0.5));
        let cfg = SamplerConfig::new(make_boundary_schedule(1000, 20, 2).unwrap(), true, 11);
        let a = aias_sample(&s, &cfg, &den, Some(&farm), &input, &mut RandomStream::new(11, 0)).unwrap();
        let b = aias_sample(&s, &cfg, &den, Some(&farm), &input, &mut RandomStream::new(11, 0)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(aias_sample(&s, &cfg, &den, None, &input, &mut r).is_err());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let s = sched();
        let input = SynthesisInput {
            background_full: Tensor::zeros(1, 4, 4),
            background_latent: Tensor::zeros(1, 4, 4),
            mask: AnomalyMask::zeros(4, 5),
        };
        let den = constant_denoiser(&s, Tensor::zeros(1, 4, 4));
        let cfg = SamplerConfig::new(make_boundary_schedule(1000, 5, 2).unwrap(), false, 0);
        let mut r = RandomStream::new(0, 0);
        assert!(aias_sample(&s, &cfg, &den, None, &input, &mut r).is_err());
        assert!(SynthesisInput::new(Tensor::zeros(1, 4, 4), AnomalyMask::zeros(3, 4)).is_err());

        let short = build_linear_schedule(500, 1e-4, 0.02).unwrap();
        let input = SynthesisInput::new(Tensor::zeros(1, 4, 4), AnomalyMask::zeros(4, 4)).unwrap();
        assert!(aias_sample(&short, &cfg, &den, None, &input, &mut r).is_err());
    }

    #[test]
    fn fused_noise_levels_are_consistent() {
        // Foreground and background variances after each fusion both track 1 − ᾱ_{t_e}.
        let s = sched();
        let bounds = make_boundary_schedule(1000, 6, 2).unwrap();
        let cfg = SamplerConfig::new(bounds.clone(), false, 0);
        let m = AnomalyMask::from_fn(4, 4, |i, _| i < 2);
        let input = SynthesisInput::new(Tensor::filled(1, 4, 4, 0.4), m.clone()).unwrap();
        let den = constant_denoiser(&s, Tensor::filled(1, 4, 4, 0.4));
        let n = 4000;
        let levels = bounds.len() - 1;
        let mut stats = vec![[0.0f64; 4]; levels];
        let mut ts = vec![0usize; levels];
        for run in 0..n {
            let mut rng = RandomStream::new(123, run as u64);
            let mut k = 0;
            aias_sample_traced(&s, &cfg, &den, None, &input, &mut rng, |t_e, x| {
                ts[k] = t_e;
                for i in 0..4 {
                    for j in 0..4 {
                        let v = x.get(0, i, j) - s.alpha_bar(t_e).sqrt() * 0.4;
                        let slot = if m.is_set(i, j) { 0 } else { 2 };
                        stats[k][slot] += v;
                        stats[k][slot + 1] += v * v;
                    }
                }
                k += 1;
            })
            .unwrap();
        }
        let count = (n * 8) as f64;
        for (k, st) in stats.iter().enumerate() {
            let expected = 1.0 - s.alpha_bar(ts[k]);
            for slot in [0, 2] {
                let mean = st[slot] / count;
                let var = st[slot + 1] / count - mean * mean;
                assert!(
                    ((var - expected) / expected).abs() < 0.05,
                    "t_e={} slot={slot} var={var} expected={expected}",
                    ts[k]
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn decompose_parts_sum_bitwise(seed in any::<u64>()) {
            let mut r = RandomStream::new(seed, 0);
            let x = r.gaussian(2, 5, 3);
            let m = random_mask(&mut r, 5, 3);
            let (fg, bg) = decompose(&x, &m).unwrap();
            let sum = fg.lincomb(1.0, &bg, 1.0).unwrap();
            prop_assert!(sum.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
