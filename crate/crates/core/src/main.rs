use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use aias_core::config::{Config, DenoiserChoice};
use aias_core::corpus::synthetic_corpus;
use aias_core::denoiser::{constant_denoiser, gaussian_analytic_denoiser, AffineDenoiser, Denoiser, GaussianWorld};
use aias_core::eval::{bench_steps, score_directory, write_records, BenchConfig};
use aias_core::farm::{farm_train, masked_region_mse, FarmParams};
use aias_core::io::{load_image, load_mask, save_mask, save_tensor, DatasetIndex};
use aias_core::kernel::{aggregate_bruteforce, aggregate_segment, compose_kernels, make_boundary_schedule};
use aias_core::sampler::{aias_sample, SamplerConfig, SynthesisInput};
use aias_core::{AnomalyMask, RandomStream, Tensor};

#[derive(Parser)]
#[command(name = "aias", version, about = "Anomaly-aware accelerated diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the closed-form segment kernels against the step-by-step recursion.
    VerifyKernel(Common),
    /// Train the foreground reconstruction network and save its parameters.
    TrainFarm(Common),
    /// Synthesize (image, mask) pairs from a background and a mask.
    Sample(Common),
    /// Sweep boundary counts in the Gaussian world and report cost and accuracy.
    Bench(Common),
    /// Score predicted masks in DIR/pred against DIR/gt.
    Score {
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Boundary count(s); `bench` accepts a comma-separated list.
    #[arg(short = 'K', long = "steps", value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    no_farm: bool,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t1) = self.t1 {
            cfg.t1 = t1;
        }
        if !self.steps.is_empty() {
            cfg.k = self.steps[0];
            cfg.bench_k = self.steps.clone();
        }
        if self.no_farm {
            cfg.farm_enabled = false;
        }
        Ok(cfg)
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

/// Writes to `path` when given, otherwise to stdout.
fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout()),
    })
}

fn verify_kernel(common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let sched = cfg.schedule()?;
    let steps = sched.steps();
    let mut rng = RandomStream::new(cfg.seed, 0);
    let (mut oracle, mut telescoping, mut marginal, mut composition) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    for _ in 0..cfg.verify_pairs {
        let t_e = rng.uniform_int(0, steps - 1);
        let t_s = rng.uniform_int(t_e + 1, steps);
        let fast = aggregate_segment(&sched, t_s, t_e)?;
        let slow = aggregate_bruteforce(&sched, t_s, t_e)?;
        oracle = oracle
            .max(rel(fast.pi, slow.pi))
            .max(rel(fast.sigma_coef, slow.sigma_coef))
            .max(rel(fast.var, slow.var));
        telescoping = telescoping.max(fast.telescoping_residual(&sched));
        marginal = marginal.max(fast.marginal_residual(&sched));
        let t_m = rng.uniform_int(t_e, t_s);
        let joined = compose_kernels(&aggregate_segment(&sched, t_m, t_e)?, &aggregate_segment(&sched, t_s, t_m)?)?;
        composition = composition
            .max(rel(joined.pi, fast.pi))
            .max(rel(joined.sigma_coef, fast.sigma_coef))
            .max(rel(joined.var, fast.var));
    }
    let checks = [
        ("closed_form_vs_recursion", oracle, 1e-10),
        ("telescoping", telescoping, 1e-8),
        ("marginal", marginal, 1e-8),
        ("composition", composition, 1e-10),
    ];
    let mut out = sink(common.out.as_deref())?;
    let mut failed = Vec::new();
    for (name, value, tol) in checks {
        let ok = value <= tol;
        writeln!(out, "{name} residual={value:.3e} tol={tol:.0e} {}", if ok { "pass" } else { "FAIL" })?;
        if !ok {
            failed.push(name);
        }
    }
    out.flush()?;
    if !failed.is_empty() {
        bail!("kernel checks failed: {}", failed.join(", "));
    }
    Ok(())
}

fn train_farm(common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let out = common.out()?;
    let sched = cfg.schedule()?;
    let data = match &cfg.dataset {
        Some(root) => DatasetIndex::scan(root)?.load_all()?,
        None => synthetic_corpus(cfg.corpus_size, cfg.image_size, cfg.seed),
    };
    let channels = data.first().context("empty dataset")?.0.channels();
    let dims = cfg.farm_dims(channels);
    let train = aias_core::farm::TrainingConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    // fixed held-out draws measure progress on the masked region
    let mut rng = RandomStream::new(cfg.seed, u64::MAX);
    let probe: Vec<_> = data
        .iter()
        .take(32)
        .map(|(x, m)| (x.clone(), m.clone(), rng.uniform_int(1, sched.steps()), rng.gaussian_like(x)))
        .collect();
    let before = masked_region_mse(&probe, &sched, &FarmParams::init(dims, train.seed)?)?;
    let (params, log) = farm_train(&data, &sched, &train, dims)?;
    let after = masked_region_mse(&probe, &sched, &params)?;
    params.save(out)?;
    let (head, tail) = log.head_tail_means(0.05);
    println!("iterations={} loss_head={head:.6} loss_tail={tail:.6}", log.losses.len());
    println!("masked_mse_initial={before:.6} masked_mse_final={after:.6}");
    Ok(())
}

fn load_background(path: &Path) -> anyhow::Result<Tensor> {
    load_image(path).with_context(|| format!("loading background {}", path.display()))
}

fn sample(common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let out = common.out()?;
    let background = load_background(common.background.as_deref().context("--background is required")?)?;
    let mask_path = common.mask.as_deref().context("--mask is required")?;
    let mask = load_mask(mask_path).with_context(|| format!("loading mask {}", mask_path.display()))?;
    let sched = cfg.schedule()?;
    let input = SynthesisInput::new(background.clone(), mask.clone())?;
    let farm = if cfg.farm_enabled {
        let path = cfg
            .farm_params
            .as_deref()
            .context("FARM is enabled: set farm_params in the config or pass --no-farm")?;
        Some(FarmParams::load(path)?)
    } else {
        None
    };
    let denoiser: Box<dyn Denoiser> = match &cfg.denoiser {
        DenoiserChoice::Gaussian => {
            let [c, h, w] = background.shape();
            let world = GaussianWorld::uniform(c, h, w, cfg.gaussian_mu0, cfg.gaussian_s0sq)?;
            Box::new(gaussian_analytic_denoiser(world, &sched))
        }
        DenoiserChoice::Background => Box::new(constant_denoiser(&sched, background.clone())),
        DenoiserChoice::File(path) => Box::new(AffineDenoiser::load(path)?),
    };
    let sampler = SamplerConfig::new(cfg.boundary_schedule()?, cfg.farm_enabled, cfg.seed);
    std::fs::create_dir_all(out)?;
    for i in 0..cfg.samples {
        let mut rng = RandomStream::new(cfg.seed, i as u64);
        let image = aias_sample(&sched, &sampler, denoiser.as_ref(), farm.as_ref(), &input, &mut rng)?;
        save_tensor(out.join(format!("image_{i:04}.aft")), &image)?;
        save_mask(out.join(format!("mask_{i:04}.pgm")), &mask)?;
    }
    println!("wrote {} pair(s) to {}", cfg.samples, out.display());
    Ok(())
}

fn bench(common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let sched = cfg.schedule()?;
    let n = cfg.bench_size;
    let world = GaussianWorld::uniform(1, n, n, cfg.gaussian_mu0, cfg.gaussian_s0sq)?;
    let denoiser = gaussian_analytic_denoiser(world, &sched);
    let input = SynthesisInput::new(Tensor::filled(1, n, n, cfg.gaussian_mu0), AnomalyMask::ones(n, n))?;
    for &k in &cfg.bench_k {
        make_boundary_schedule(sched.steps(), k, cfg.t1)?;
    }
    let bench_cfg = BenchConfig {
        k_list: cfg.bench_k.clone(),
        t1: cfg.t1,
        repeats: cfg.bench_repeats,
        seed: cfg.seed,
        farm_enabled: false,
        target_mean: cfg.gaussian_mu0,
        target_std: cfg.gaussian_s0sq.sqrt(),
    };
    let records = bench_steps(&sched, &denoiser, None, &input, &bench_cfg)?;
    for r in &records {
        eprintln!(
            "K={} calls={} wall_time={:.3}s moment_error={:.4}",
            r.k, r.denoiser_calls, r.wall_time, r.terminal_moment_error
        );
    }
    let mut out = sink(common.out.as_deref())?;
    write_records(&mut out, &records)?;
    Ok(())
}

fn score(dir: &Path, common: &Common) -> anyhow::Result<()> {
    common.resolve()?;
    let records = score_directory(dir)?;
    let n = records.len() as f64;
    let miou = records.iter().map(|r| r.miou).sum::<f64>() / n;
    let acc = records.iter().map(|r| r.acc).sum::<f64>() / n;
    let mut out = sink(common.out.as_deref())?;
    write_records(&mut out, &records)?;
    eprintln!("pairs={} mean_miou={miou:.4} mean_acc={acc:.4}", records.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::VerifyKernel(c) => verify_kernel(c),
        Command::TrainFarm(c) => train_farm(c),
        Command::Sample(c) => sample(c),
        Command::Bench(c) => bench(c),
        Command::Score { dir, common } => score(dir, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
