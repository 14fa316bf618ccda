//! Segment-kernel diffusion sampling for mask-conditioned anomaly synthesis.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: discrete noise schedule and the one-step posterior coefficients.
//! - [`kernel`]: closed-form multi-step reverse kernels, their step-by-step oracle,
//!   and boundary schedules.
//! - [`denoiser`]: the noise-prediction interface plus analytic and trainable denoisers.
//! - [`farm`]: the foreground-aware reconstruction network and its training loop.
//! - [`sampler`]: DDPM reference sampling, accelerated coarse-to-fine sampling,
//!   and foreground/background fusion.
//! - [`eval`]: segmentation metrics, Monte-Carlo moment tests and the step-sweep bench.
//! - [`io`], [`rng`], [`config`], [`corpus`]: file formats, random streams, configuration
//!   and the synthetic defect corpus.

pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod farm;
pub mod io;
pub mod kernel;
pub mod mask;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::AnomalyMask;
pub use rng::RandomStream;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
