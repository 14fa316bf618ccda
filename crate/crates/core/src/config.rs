//! Flat `key = value` run configuration. Blank lines and `#` comments are ignored;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::farm::{FarmDims, TrainingConfig};
use crate::kernel::{make_boundary_schedule, BoundarySchedule};
use crate::schedule::{build_linear_schedule, NoiseSchedule};

/// Which noise predictor `sample` uses.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserChoice {
    /// Analytic posterior mean of the uniform Gaussian world.
    Gaussian,
    /// Predicts noise as if the clean image were the background.
    Background,
    /// A serialized affine denoiser.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub k: usize,
    pub t1: usize,
    /// Explicit boundary list; overrides `k` and `t1` when set.
    pub boundaries: Option<Vec<usize>>,
    pub seed: u64,
    pub farm_enabled: bool,
    pub farm_params: Option<PathBuf>,
    pub features: usize,
    pub embed_dim: usize,
    pub train: TrainingConfig,
    pub corpus_size: usize,
    pub image_size: usize,
    pub dataset: Option<PathBuf>,
    pub samples: usize,
    pub denoiser: DenoiserChoice,
    pub gaussian_mu0: f64,
    pub gaussian_s0sq: f64,
    pub bench_k: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_size: usize,
    pub verify_pairs: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            k: 50,
            t1: 2,
            boundaries: None,
            seed: 0,
            farm_enabled: true,
            farm_params: None,
            features: 16,
            embed_dim: 64,
            train: TrainingConfig::default(),
            corpus_size: 200,
            image_size: 32,
            dataset: None,
            samples: 1,
            denoiser: DenoiserChoice::Gaussian,
            gaussian_mu0: 0.3,
            gaussian_s0sq: 0.04,
            bench_k: vec![2, 5, 10, 30, 50, 100, 200, 500],
            bench_repeats: 200,
            bench_size: 8,
            verify_pairs: 200,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value for {key}: {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "timesteps" => self.timesteps = parse_value(key, v)?,
            "beta_start" => self.beta_start = parse_value(key, v)?,
            "beta_end" => self.beta_end = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "t1" => self.t1 = parse_value(key, v)?,
            "boundaries" => self.boundaries = Some(parse_list(key, v)?),
            "seed" => self.seed = parse_value(key, v)?,
            "farm_enabled" => self.farm_enabled = parse_bool(key, v)?,
            "farm_params" => self.farm_params = Some(PathBuf::from(v)),
            "features" => self.features = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "lambda1" => self.train.lambda1 = parse_value(key, v)?,
            "lambda2" => self.train.lambda2 = parse_value(key, v)?,
            "lr" => self.train.lr = parse_value(key, v)?,
            "batch" => self.train.batch = parse_value(key, v)?,
            "iters" => self.train.iters = parse_value(key, v)?,
            "corpus_size" => self.corpus_size = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "samples" => self.samples = parse_value(key, v)?,
            "denoiser" => {
                self.denoiser = match v {
                    "gaussian" => DenoiserChoice::Gaussian,
                    "background" => DenoiserChoice::Background,
                    path => DenoiserChoice::File(PathBuf::from(path)),
                }
            }
            "gaussian_mu0" => self.gaussian_mu0 = parse_value(key, v)?,
            "gaussian_s0sq" => self.gaussian_s0sq = parse_value(key, v)?,
            "bench_k" => self.bench_k = parse_list(key, v)?,
            "bench_repeats" => self.bench_repeats = parse_value(key, v)?,
            "bench_size" => self.bench_size = parse_value(key, v)?,
            "verify_pairs" => self.verify_pairs = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn boundary_schedule(&self) -> Result<BoundarySchedule> {
        match &self.boundaries {
            Some(list) => BoundarySchedule::from_list(list.clone(), self.timesteps),
            None => make_boundary_schedule(self.timesteps, self.k, self.t1),
        }
    }

    pub fn farm_dims(&self, channels: usize) -> FarmDims {
        FarmDims {
            channels,
            features: self.features,
            embed_dim: self.embed_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = Config::parse(
            "# run\n timesteps = 200\nk=10 # coarse\n\nfarm_enabled = no\nbench_k = 2, 5,10\ndenoiser = background\nlr = 1e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.timesteps, 200);
        assert_eq!(cfg.k, 10);
        assert!(!cfg.farm_enabled);
        assert_eq!(cfg.bench_k, vec![2, 5, 10]);
        assert_eq!(cfg.denoiser, DenoiserChoice::Background);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.t1, 2);
        assert_eq!(cfg.boundary_schedule().unwrap().len(), 10);
    }

    #[test]
    fn explicit_boundaries_override_k() {
        let cfg = Config::parse("timesteps = 10\nboundaries = 2,5,10").unwrap();
        assert_eq!(cfg.boundary_schedule().unwrap().boundaries(), &[2, 5, 10]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("nonsense").is_err());
        assert!(Config::parse("colour = red").is_err());
        assert!(Config::parse("k = many").is_err());
        assert!(Config::parse("farm_enabled = maybe").is_err());
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = Config::default();
        assert_eq!((cfg.timesteps, cfg.k, cfg.t1), (1000, 50, 2));
        assert_eq!((cfg.features, cfg.embed_dim), (16, 64));
        assert_eq!((cfg.train.lr, cfg.train.batch), (1.5e-4, 4));
    }
}
