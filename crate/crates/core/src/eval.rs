//! Segmentation metrics, Monte-Carlo moment checks and the step-sweep benchmark.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::denoiser::{CallCounter, Denoiser};
use crate::error::{Error, Result};
use crate::farm::FarmParams;
use crate::io::load_mask;
use crate::kernel::make_boundary_schedule;
use crate::mask::AnomalyMask;
use crate::rng::RandomStream;
use crate::sampler::{aias_sample, SamplerConfig, SynthesisInput};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Two-class segmentation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub miou: f64,
    pub acc: f64,
    pub iou_anomaly: f64,
    pub iou_background: f64,
}

/// Intersection and union counts for one class; a class absent from both masks
/// counts as perfect agreement (1/1).
fn overlap(pred: &AnomalyMask, gt: &AnomalyMask, class: u8) -> (u64, u64) {
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p == class, *g == class);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    if union == 0 {
        (1, 1)
    } else {
        (inter, union)
    }
}

/// Mean of the anomaly and background IoUs.
pub fn miou(pred: &AnomalyMask, gt: &AnomalyMask) -> Result<f64> {
    Ok(metric_report(pred, gt)?.miou)
}

pub fn pixel_accuracy(pred: &AnomalyMask, gt: &AnomalyMask) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let hits = pred.data().iter().zip(gt.data()).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.data().len() as f64)
}

pub fn metric_report(pred: &AnomalyMask, gt: &AnomalyMask) -> Result<MetricReport> {
    pred.ensure_same_shape(gt)?;
    let (i1, u1) = overlap(pred, gt, 1);
    let (i0, u0) = overlap(pred, gt, 0);
    Ok(MetricReport {
        // one rounding from the exact fraction (i1/u1 + i0/u0) / 2
        miou: (i1 * u0 + i0 * u1) as f64 / (2 * u1 * u0) as f64,
        acc: pixel_accuracy(pred, gt)?,
        iou_anomaly: i1 as f64 / u1 as f64,
        iou_background: i0 as f64 / u0 as f64,
    })
}

/// Sample count, mean and (population) variance of a stream of values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub fn of<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        // Welford's update keeps the variance accurate when the mean is large
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for &v in values {
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        Self {
            n,
            mean,
            var: if n == 0 { 0.0 } else { m2 / n as f64 },
        }
    }

    /// Pools every element of every tensor.
    pub fn of_tensors(samples: &[Tensor]) -> Self {
        Self::of(samples.iter().flat_map(|s| s.data()))
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentVerdict {
    pub observed: Moments,
    pub mean_ok: bool,
    pub var_ok: bool,
}

impl MomentVerdict {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.var_ok
    }
}

/// Pooled-element test against a known mean and variance: the mean must sit within
/// four standard errors and the variance within `var_rel_tol` relative. A zero
/// expected variance demands an exact match.
pub fn moment_test(
    samples: &[Tensor],
    expected_mean: f64,
    expected_var: f64,
    var_rel_tol: f64,
) -> Result<MomentVerdict> {
    if samples.len() < 2 {
        return Err(Error::InvalidRange(format!(
            "moment test needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let observed = Moments::of_tensors(samples);
    let (mean_ok, var_ok) = if expected_var == 0.0 {
        let exact = samples.iter().flat_map(|s| s.data()).all(|&v| v == expected_mean);
        (exact, exact)
    } else {
        let se = (expected_var / observed.n as f64).sqrt();
        (
            (observed.mean - expected_mean).abs() <= 4.0 * se,
            ((observed.var - expected_var) / expected_var).abs() <= var_rel_tol,
        )
    };
    Ok(MomentVerdict {
        observed,
        mean_ok,
        var_ok,
    })
}

/// Two-sample version: means within `se_band` combined standard errors, variances
/// within `var_rel_tol` of the reference sample `b`.
pub fn compare_moments(a: &Moments, b: &Moments, se_band: f64, var_rel_tol: f64) -> (bool, bool) {
    let se = (a.var / a.n as f64 + b.var / b.n as f64).sqrt();
    let mean_ok = (a.mean - b.mean).abs() <= se_band * se;
    let var_ok = ((a.var - b.var) / b.var).abs() <= var_rel_tol;
    (mean_ok, var_ok)
}

/// `|m̂ − μ|/s + |ŝ − s|/s` over pooled pixels.
pub fn terminal_moment_error(observed: &Moments, mean: f64, std: f64) -> f64 {
    ((observed.mean - mean).abs() + (observed.std() - std).abs()) / std
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub k: usize,
    pub t1: usize,
    pub denoiser_calls: usize,
    /// Seconds for all timed repeats. Excluded from serialized records so that
    /// report files are reproducible.
    #[serde(skip_serializing)]
    pub wall_time: f64,
    pub terminal_mean: f64,
    pub terminal_std: f64,
    pub terminal_moment_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub k_list: Vec<usize>,
    pub t1: usize,
    pub repeats: usize,
    pub seed: u64,
    pub farm_enabled: bool,
    /// Analytic terminal mean and standard deviation.
    pub target_mean: f64,
    pub target_std: f64,
}

/// For each `K`, run `repeats` syntheses (repeat `r` on stream `r`) after one discarded
/// warm-up, and record wall time, denoiser calls per synthesis and the terminal
/// moment error.
pub fn bench_steps(
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    farm: Option<&FarmParams>,
    input: &SynthesisInput,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    if cfg.repeats == 0 {
        return Err(Error::InvalidRange("bench needs at least one repeat".into()));
    }
    let mut records = Vec::with_capacity(cfg.k_list.len());
    for &k in &cfg.k_list {
        let sampler = SamplerConfig::new(make_boundary_schedule(sched.steps(), k, cfg.t1)?, cfg.farm_enabled, cfg.seed);
        let counter = CallCounter::new(denoiser);
        aias_sample(sched, &sampler, &counter, farm, input, &mut RandomStream::new(cfg.seed, u64::MAX))?;
        counter.reset();
        let mut outputs = Vec::with_capacity(cfg.repeats);
        let start = Instant::now();
        for r in 0..cfg.repeats {
            let mut rng = RandomStream::new(cfg.seed, r as u64);
            outputs.push(aias_sample(sched, &sampler, &counter, farm, input, &mut rng)?);
        }
        let wall_time = start.elapsed().as_secs_f64();
        let moments = Moments::of_tensors(&outputs);
        records.push(BenchRecord {
            k,
            t1: cfg.t1,
            denoiser_calls: counter.calls() / cfg.repeats,
            wall_time,
            terminal_mean: moments.mean,
            terminal_std: moments.std(),
            terminal_moment_error: terminal_moment_error(&moments, cfg.target_mean, cfg.target_std),
        });
    }
    Ok(records)
}

/// Write records as CSV with a header row.
pub fn write_records<T: Serialize>(out: impl Write, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub name: String,
    pub miou: f64,
    pub acc: f64,
    pub iou_anomaly: f64,
    pub iou_background: f64,
}

impl ScoreRecord {
    pub fn new(name: String, r: MetricReport) -> Self {
        Self {
            name,
            miou: r.miou,
            acc: r.acc,
            iou_anomaly: r.iou_anomaly,
            iou_background: r.iou_background,
        }
    }
}

/// Score every mask in `<dir>/pred` against the same-named file in `<dir>/gt`, in
/// name order.
pub fn score_directory(dir: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let dir = dir.as_ref();
    let (pred_dir, gt_dir) = (dir.join("pred"), dir.join("gt"));
    let mut names: Vec<String> = std::fs::read_dir(&pred_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no masks in {}", pred_dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let gt_path = gt_dir.join(&name);
            if !gt_path.is_file() {
                return Err(Error::Dataset(format!("no ground truth for {name}")));
            }
            let report = metric_report(&load_mask(pred_dir.join(&name))?, &load_mask(gt_path)?)?;
            Ok(ScoreRecord::new(name, report))
        })
        .collect()
}
