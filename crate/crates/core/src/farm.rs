//! Foreground-aware reconstruction: recover anomaly-only content from a noisy latent
//! under mask and timestep guidance, then re-inject it as anomaly-aware noise.
//!
//! Architecture (one resolution level):
//!
//! ```text
//! τ      = sinusoidal(t, d)
//! gate   = sigmoid(W₂·relu(W₁·τ + b₁) + b₂)              F values, one per channel
//! M_d    = maxpool₂(M)
//! M̃      = M_d + (1 − M_d)·gate                          F × H/2 × W/2
//! e      = relu(conv3x3_stride2(x_t))                    C → F channels
//! z      = M̃ ⊙ e + (W_p·τ + b_p)                         projection broadcast spatially
//! x̂₀^an  = relu(conv3x3([upsample₂(z); M]))              F+1 → C channels
//! ```
//!
//! Training minimises `λ₂·mean((F_φ(x_t, M, t) − M⊙x₀)²)`; the noise-prediction term
//! of the joint objective only reaches the denoiser's parameters.

#![allow(clippy::needless_range_loop)]

use std::path::Path;

use crate::denoiser::{Denoiser, TrainLog};
use crate::error::{Error, Result};
use crate::io::{Bundle, RawTensor};
use crate::mask::AnomalyMask;
use crate::optim::Adam;
use crate::rng::RandomStream;
use crate::schedule::{forward_marginal, NoiseSchedule};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const BG_HIDDEN: usize = 32;
/// Encoder stride; also the mask downsampling factor.
pub const ENCODER_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 1.5e-4,
            batch: 4,
            iters: 5000,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1.is_nan() || self.lambda2.is_nan() || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedding {
    pub vec: Vec<f64>,
}

impl TimestepEmbedding {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// Transformer-style embedding: `[sin(t·ω_k)]_k ++ [cos(t·ω_k)]_k` with
/// `ω_k = 10000^(−k/(d/2))`.
pub fn sinusoidal_embedding(t: usize, d: usize) -> Result<TimestepEmbedding> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::InvalidRange(format!(
            "embedding dimension must be even and >= 2, got {d}"
        )));
    }
    let half = d / 2;
    let mut vec = vec![0.0; d];
    for k in 0..half {
        let freq = (-(k as f64) / half as f64 * 10000f64.ln()).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        vec[k] = s;
        vec[half + k] = c;
    }
    Ok(TimestepEmbedding { vec })
}

/// Max-pool by `factor`: a cell is foreground iff any covered pixel is.
pub fn downsample_mask(m: &AnomalyMask, factor: usize) -> Result<AnomalyMask> {
    if factor == 0 || !m.height().is_multiple_of(factor) || !m.width().is_multiple_of(factor) {
        return Err(Error::InvalidRange(format!(
            "mask {}x{} not divisible by factor {factor}",
            m.height(),
            m.width()
        )));
    }
    Ok(AnomalyMask::from_fn(m.height() / factor, m.width() / factor, |i, j| {
        (0..factor).any(|a| (0..factor).any(|b| m.is_set(i * factor + a, j * factor + b)))
    }))
}

/// Channel count, feature width and embedding size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FarmDims {
    pub channels: usize,
    pub features: usize,
    pub embed_dim: usize,
}

impl Default for FarmDims {
    fn default() -> Self {
        Self {
            channels: 1,
            features: 16,
            embed_dim: 64,
        }
    }
}

/// Named parameter groups in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    EncW,
    EncB,
    DecW,
    DecB,
    BgW1,
    BgB1,
    BgW2,
    BgB2,
    ProjW,
    ProjB,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::EncW,
        Group::EncB,
        Group::DecW,
        Group::DecB,
        Group::BgW1,
        Group::BgB1,
        Group::BgW2,
        Group::BgB2,
        Group::ProjW,
        Group::ProjB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::EncW => "enc.weight",
            Group::EncB => "enc.bias",
            Group::DecW => "dec.weight",
            Group::DecB => "dec.bias",
            Group::BgW1 => "bg.weight1",
            Group::BgB1 => "bg.bias1",
            Group::BgW2 => "bg.weight2",
            Group::BgB2 => "bg.bias2",
            Group::ProjW => "proj.weight",
            Group::ProjB => "proj.bias",
        }
    }

    fn dims(self, d: &FarmDims) -> Vec<usize> {
        let (c, f, e) = (d.channels, d.features, d.embed_dim);
        match self {
            Group::EncW => vec![f, c, KERNEL, KERNEL],
            Group::EncB => vec![f],
            Group::DecW => vec![c, f + 1, KERNEL, KERNEL],
            Group::DecB => vec![c],
            Group::BgW1 => vec![BG_HIDDEN, e],
            Group::BgB1 => vec![BG_HIDDEN],
            Group::BgW2 => vec![f, BG_HIDDEN],
            Group::BgB2 => vec![f],
            Group::ProjW => vec![f, e],
            Group::ProjB => vec![f],
        }
    }

    /// Fan-in used for the `U(−1/√fan_in, 1/√fan_in)` initialisation.
    fn fan_in(self, d: &FarmDims) -> usize {
        match self {
            Group::EncW | Group::EncB => d.channels * KERNEL * KERNEL,
            Group::DecW | Group::DecB => (d.features + 1) * KERNEL * KERNEL,
            Group::BgW1 | Group::BgB1 | Group::ProjW | Group::ProjB => d.embed_dim,
            Group::BgW2 | Group::BgB2 => BG_HIDDEN,
        }
    }
}

/// All FARM weights in one flat buffer, laid out group by group in [`Group::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmParams {
    dims: FarmDims,
    offsets: [usize; 11],
    data: Vec<f64>,
}

impl FarmParams {
    pub fn zeros(dims: FarmDims) -> Result<Self> {
        if dims.channels == 0 || dims.features == 0 {
            return Err(Error::InvalidRange("FARM needs at least one channel and feature".into()));
        }
        sinusoidal_embedding(0, dims.embed_dim)?;
        let mut offsets = [0usize; 11];
        for (k, g) in Group::ALL.iter().enumerate() {
            offsets[k + 1] = offsets[k] + g.dims(&dims).iter().product::<usize>();
        }
        Ok(Self {
            dims,
            offsets,
            data: vec![0.0; offsets[10]],
        })
    }

    /// Uniform `[−k, k]` with `k = 1/√fan_in`, drawn in group order from `seed`.
    pub fn init(dims: FarmDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = RandomStream::new(seed, 0x_fa_53);
        for g in Group::ALL {
            let k = 1.0 / (g.fan_in(&dims) as f64).sqrt();
            for v in p.group_mut(g) {
                *v = rng.uniform_range(-k, k);
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> FarmDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn group_range(&self, g: Group) -> std::ops::Range<usize> {
        let k = g as usize;
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.data[self.group_range(g)]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        let r = self.group_range(g);
        &mut self.data[r]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new("farm");
        for g in Group::ALL {
            b.push(g.name(), RawTensor::from_f64(&g.dims(&self.dims), self.group(g)));
        }
        b
    }

    pub fn from_bundle(b: &Bundle, path: &Path) -> Result<Self> {
        if b.kind != "farm" {
            return Err(Error::format(path, format!("expected farm bundle, got {}", b.kind)));
        }
        let section = |g: Group| {
            b.get(g.name())
                .ok_or_else(|| Error::format(path, format!("missing section {}", g.name())))
        };
        let enc = section(Group::EncW)?.dims_usize();
        let bg1 = section(Group::BgW1)?.dims_usize();
        if enc.len() != 4 || bg1.len() != 2 {
            return Err(Error::format(path, "malformed farm weight ranks"));
        }
        let dims = FarmDims {
            channels: enc[1],
            features: enc[0],
            embed_dim: bg1[1],
        };
        let mut p = Self::zeros(dims)?;
        for g in Group::ALL {
            let raw = section(g)?;
            if raw.dims_usize() != g.dims(&dims) {
                return Err(Error::format(
                    path,
                    format!("section {} has dims {:?}, expected {:?}", g.name(), raw.dims, g.dims(&dims)),
                ));
            }
            p.group_mut(g).copy_from_slice(&raw.to_f64());
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bundle(&Bundle::load(path)?, path)
    }
}

/// Per-channel soft mask at encoder resolution: `F × H' × W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub data: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `out[o] = b[o] + Σ_i w[o, i]·x[i]` for a row-major `n_out × n_in` weight.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

struct GateOut {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

fn background_gate(tau: &TimestepEmbedding, p: &FarmParams) -> GateOut {
    let hidden_pre = affine(p.group(Group::BgW1), p.group(Group::BgB1), &tau.vec);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| relu(v)).collect();
    let gate = affine(p.group(Group::BgW2), p.group(Group::BgB2), &hidden)
        .into_iter()
        .map(sigmoid)
        .collect();
    GateOut {
        hidden_pre,
        hidden,
        gate,
    }
}

fn soft_from_gate(m_d: &AnomalyMask, gate: &[f64]) -> SoftMask {
    let mut data = Tensor::zeros(gate.len(), m_d.height(), m_d.width());
    for (f, g) in gate.iter().enumerate() {
        for i in 0..m_d.height() {
            for j in 0..m_d.width() {
                let md = m_d.value(i, j);
                data.set(f, i, j, md + (1.0 - md) * g);
            }
        }
    }
    SoftMask { data }
}

/// `M̃ = M_d + (1 − M_d)·sigmoid(f_bg(τ))`, one gate per feature channel.
pub fn soft_background_mask(m_d: &AnomalyMask, tau: &TimestepEmbedding, p: &FarmParams) -> Result<SoftMask> {
    if tau.dim() != p.dims.embed_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![p.dims.embed_dim],
            actual: vec![tau.dim()],
        });
    }
    Ok(soft_from_gate(m_d, &background_gate(tau, p).gate))
}

/// 3×3 convolution with zero padding 1 and the given stride.
fn conv3x3(x: &Tensor, w: &[f64], b: &[f64], stride: usize, out_h: usize, out_w: usize) -> Tensor {
    let c_in = x.channels();
    let c_out = b.len();
    let (h, wd) = (x.height() as isize, x.width() as isize);
    let mut out = Tensor::zeros(c_out, out_h, out_w);
    for o in 0..c_out {
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ki in 0..KERNEL {
                        let y = (stride * i + ki) as isize - 1;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for kj in 0..KERNEL {
                            let xx = (stride * j + kj) as isize - 1;
                            if xx < 0 || xx >= wd {
                                continue;
                            }
                            acc += w[((o * c_in + c) * KERNEL + ki) * KERNEL + kj]
                                * x.get(c, y as usize, xx as usize);
                        }
                    }
                }
                out.set(o, i, j, acc);
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]: accumulates weight/bias gradients and, when requested,
/// the input gradient for the first `dx_channels` channels.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &Tensor,
    w: &[f64],
    stride: usize,
    d_out: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut Tensor>,
) {
    let c_in = x.channels();
    let (h, wd) = (x.height() as isize, x.width() as isize);
    for o in 0..d_out.channels() {
        for i in 0..d_out.height() {
            for j in 0..d_out.width() {
                let g = d_out.get(o, i, j);
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for c in 0..c_in {
                    for ki in 0..KERNEL {
                        let y = (stride * i + ki) as isize - 1;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for kj in 0..KERNEL {
                            let xx = (stride * j + kj) as isize - 1;
                            if xx < 0 || xx >= wd {
                                continue;
                            }
                            let k = ((o * c_in + c) * KERNEL + ki) * KERNEL + kj;
                            dw[k] += g * x.get(c, y as usize, xx as usize);
                            if let Some(dx) = dx.as_deref_mut() {
                                if c < dx.channels() {
                                    let idx = dx.index(c, y as usize, xx as usize);
                                    dx.data_mut()[idx] += g * w[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_inputs(x_t: &Tensor, m: &AnomalyMask, p: &FarmParams) -> Result<()> {
    m.ensure_matches(x_t)?;
    if x_t.channels() != p.dims.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![p.dims.channels, x_t.height(), x_t.width()],
            actual: x_t.shape().to_vec(),
        });
    }
    if !x_t.height().is_multiple_of(ENCODER_STRIDE) || !x_t.width().is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::InvalidRange(format!(
            "spatial size {}x{} must be divisible by {ENCODER_STRIDE}",
            x_t.height(),
            x_t.width()
        )));
    }
    Ok(())
}

/// Intermediates of one forward pass, kept for backpropagation.
struct Forward {
    tau: TimestepEmbedding,
    gate: GateOut,
    m_d: AnomalyMask,
    soft: SoftMask,
    enc_pre: Tensor,
    enc: Tensor,
    up: Tensor,
    dec_pre: Tensor,
    out: Tensor,
}

fn encode_parts(
    x_t: &Tensor,
    m: &AnomalyMask,
    t: usize,
    p: &FarmParams,
) -> Result<(TimestepEmbedding, GateOut, AnomalyMask, SoftMask, Tensor, Tensor, Tensor)> {
    check_inputs(x_t, m, p)?;
    let tau = sinusoidal_embedding(t, p.dims.embed_dim)?;
    let gate = background_gate(&tau, p);
    let m_d = downsample_mask(m, ENCODER_STRIDE)?;
    let soft = soft_from_gate(&m_d, &gate.gate);
    let (h2, w2) = (x_t.height() / ENCODER_STRIDE, x_t.width() / ENCODER_STRIDE);
    let enc_pre = conv3x3(x_t, p.group(Group::EncW), p.group(Group::EncB), ENCODER_STRIDE, h2, w2);
    let enc = enc_pre.map(relu);
    let proj = affine(p.group(Group::ProjW), p.group(Group::ProjB), &tau.vec);
    let mut z = enc.zip_map(&soft.data, |e, s| e * s)?;
    for f in 0..p.dims.features {
        for i in 0..h2 {
            for j in 0..w2 {
                let v = z.get(f, i, j) + proj[f];
                z.set(f, i, j, v);
            }
        }
    }
    Ok((tau, gate, m_d, soft, enc_pre, enc, z))
}

/// Nearest-neighbour upsample of `z` with `M` appended as the last channel.
fn upsample_with_mask(z: &Tensor, m: &AnomalyMask) -> Tensor {
    let f = z.channels();
    let (h, w) = (m.height(), m.width());
    let mut up = Tensor::zeros(f + 1, h, w);
    for c in 0..f {
        for y in 0..h {
            for x in 0..w {
                up.set(c, y, x, z.get(c, y / ENCODER_STRIDE, x / ENCODER_STRIDE));
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            up.set(f, y, x, m.value(y, x));
        }
    }
    up
}

fn decode_parts(z: &Tensor, m: &AnomalyMask, p: &FarmParams) -> Result<(Tensor, Tensor, Tensor)> {
    let d = p.dims;
    if z.channels() != d.features
        || z.height() * ENCODER_STRIDE != m.height()
        || z.width() * ENCODER_STRIDE != m.width()
    {
        return Err(Error::ShapeMismatch {
            expected: vec![d.features, m.height() / ENCODER_STRIDE, m.width() / ENCODER_STRIDE],
            actual: z.shape().to_vec(),
        });
    }
    let up = upsample_with_mask(z, m);
    let dec_pre = conv3x3(&up, p.group(Group::DecW), p.group(Group::DecB), 1, m.height(), m.width());
    let out = dec_pre.map(relu);
    Ok((up, dec_pre, out))
}

/// `z = M̃ ⊙ f_enc(x_t) + Proj(τ)` at half resolution with `F` channels.
pub fn farm_encode(x_t: &Tensor, m: &AnomalyMask, t: usize, p: &FarmParams) -> Result<Tensor> {
    Ok(encode_parts(x_t, m, t, p)?.6)
}

/// `x̂₀^an = f_dec(z, M)` at full resolution with `C` channels.
pub fn farm_decode(z: &Tensor, m: &AnomalyMask, p: &FarmParams) -> Result<Tensor> {
    Ok(decode_parts(z, m, p)?.2)
}

fn forward(x_t: &Tensor, m: &AnomalyMask, t: usize, p: &FarmParams) -> Result<Forward> {
    let (tau, gate, m_d, soft, enc_pre, enc, z) = encode_parts(x_t, m, t, p)?;
    let (up, dec_pre, out) = decode_parts(&z, m, p)?;
    Ok(Forward {
        tau,
        gate,
        m_d,
        soft,
        enc_pre,
        enc,
        up,
        dec_pre,
        out,
    })
}

/// `F_φ(x_t, M, t)`: the pseudo-clean anomaly-only estimate.
pub fn farm_reconstruct(x_t: &Tensor, m: &AnomalyMask, t: usize, p: &FarmParams) -> Result<Tensor> {
    let z = farm_encode(x_t, m, t, p)?;
    farm_decode(&z, m, p)
}

/// Forward-diffuse the reconstruction to `t` with fresh noise and splice it into the
/// masked pixels; background pixels are copied from `x_t` untouched.
pub fn farm_inject(
    x_t: &Tensor,
    m: &AnomalyMask,
    t: usize,
    p: &FarmParams,
    sched: &NoiseSchedule,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    let x_an = farm_reconstruct(x_t, m, t, p)?;
    let eps = rng.gaussian_like(x_t);
    let noised = forward_marginal(sched, &x_an, t, &eps)?;
    let mut out = x_t.clone();
    for c in 0..x_t.channels() {
        for i in 0..x_t.height() {
            for j in 0..x_t.width() {
                if m.is_set(i, j) {
                    out.set(c, i, j, noised.get(c, i, j));
                }
            }
        }
    }
    Ok(out)
}

/// `M ⊙ x₀`, the reconstruction target.
pub fn masked_target(x0: &Tensor, m: &AnomalyMask) -> Result<Tensor> {
    m.ensure_matches(x0)?;
    let mut out = Tensor::zeros(x0.channels(), x0.height(), x0.width());
    for c in 0..x0.channels() {
        for i in 0..x0.height() {
            for j in 0..x0.width() {
                if m.is_set(i, j) {
                    out.set(c, i, j, x0.get(c, i, j));
                }
            }
        }
    }
    Ok(out)
}

fn backward(fw: &Forward, x_t: &Tensor, d_out: &Tensor, p: &FarmParams, grad: &mut [f64]) {
    let d = p.dims;
    let (f_n, h2, w2) = (d.features, fw.enc.height(), fw.enc.width());
    let mut g = FarmParams::zeros(d).expect("dims already validated");

    // decoder
    let d_dec_pre = d_out.zip_map(&fw.dec_pre, |g, pre| if pre > 0.0 { g } else { 0.0 }).unwrap();
    let mut d_up = Tensor::zeros(f_n, fw.up.height(), fw.up.width());
    {
        let r_w = g.group_range(Group::DecW);
        let r_b = g.group_range(Group::DecB);
        let (lo, hi) = g.data.split_at_mut(r_b.start);
        conv3x3_backward(
            &fw.up,
            p.group(Group::DecW),
            1,
            &d_dec_pre,
            &mut lo[r_w],
            &mut hi[..r_b.len()],
            Some(&mut d_up),
        );
    }

    // upsample adjoint: sum each 2×2 block
    let mut d_z = Tensor::zeros(f_n, h2, w2);
    for f in 0..f_n {
        for y in 0..d_up.height() {
            for x in 0..d_up.width() {
                let idx = d_z.index(f, y / ENCODER_STRIDE, x / ENCODER_STRIDE);
                d_z.data_mut()[idx] += d_up.get(f, y, x);
            }
        }
    }

    // z = soft ⊙ enc + proj
    let mut d_proj = vec![0.0; f_n];
    let mut d_gate = vec![0.0; f_n];
    let mut d_enc = Tensor::zeros(f_n, h2, w2);
    for f in 0..f_n {
        for i in 0..h2 {
            for j in 0..w2 {
                let gz = d_z.get(f, i, j);
                d_proj[f] += gz;
                d_enc.set(f, i, j, gz * fw.soft.data.get(f, i, j));
                d_gate[f] += gz * fw.enc.get(f, i, j) * (1.0 - fw.m_d.value(i, j));
            }
        }
    }
    let e_dim = d.embed_dim;
    {
        let gw = g.group_mut(Group::ProjW);
        for f in 0..f_n {
            for k in 0..e_dim {
                gw[f * e_dim + k] += d_proj[f] * fw.tau.vec[k];
            }
        }
        g.group_mut(Group::ProjB).copy_from_slice(&d_proj);
    }

    // background gate MLP
    let d_gate_pre: Vec<f64> = d_gate
        .iter()
        .zip(&fw.gate.gate)
        .map(|(dg, s)| dg * s * (1.0 - s))
        .collect();
    let mut d_hidden = vec![0.0; BG_HIDDEN];
    {
        let w2 = p.group(Group::BgW2);
        let gw2 = g.group_mut(Group::BgW2);
        for f in 0..f_n {
            for h in 0..BG_HIDDEN {
                gw2[f * BG_HIDDEN + h] += d_gate_pre[f] * fw.gate.hidden[h];
                d_hidden[h] += d_gate_pre[f] * w2[f * BG_HIDDEN + h];
            }
        }
        g.group_mut(Group::BgB2).copy_from_slice(&d_gate_pre);
    }
    let d_hidden_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&fw.gate.hidden_pre)
        .map(|(dh, pre)| if *pre > 0.0 { *dh } else { 0.0 })
        .collect();
    {
        let gw1 = g.group_mut(Group::BgW1);
        for h in 0..BG_HIDDEN {
            for k in 0..e_dim {
                gw1[h * e_dim + k] += d_hidden_pre[h] * fw.tau.vec[k];
            }
        }
        g.group_mut(Group::BgB1).copy_from_slice(&d_hidden_pre);
    }

    // encoder
    let d_enc_pre = d_enc.zip_map(&fw.enc_pre, |g, pre| if pre > 0.0 { g } else { 0.0 }).unwrap();
    {
        let r_w = g.group_range(Group::EncW);
        let r_b = g.group_range(Group::EncB);
        let (lo, hi) = g.data.split_at_mut(r_b.start);
        conv3x3_backward(
            x_t,
            p.group(Group::EncW),
            ENCODER_STRIDE,
            &d_enc_pre,
            &mut lo[r_w],
            &mut hi[..r_b.len()],
            None,
        );
    }

    for (a, b) in grad.iter_mut().zip(&g.data) {
        *a += b;
    }
}

/// Reconstruction term `λ₂·mean((F_φ(x_t, M, t) − M⊙x₀)²)` and its gradient in φ.
pub fn reconstruction_loss_and_grad(
    x_t: &Tensor,
    x0: &Tensor,
    m: &AnomalyMask,
    t: usize,
    p: &FarmParams,
    lambda2: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; p.len()];
    let loss = accumulate_reconstruction(x_t, x0, m, t, p, lambda2, 1.0, &mut grad)?;
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn accumulate_reconstruction(
    x_t: &Tensor,
    x0: &Tensor,
    m: &AnomalyMask,
    t: usize,
    p: &FarmParams,
    lambda2: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let target = masked_target(x0, m)?;
    let fw = forward(x_t, m, t, p)?;
    let n = target.len() as f64;
    let scale = lambda2 / n;
    let resid = fw.out.lincomb(1.0, &target, -1.0)?;
    let loss = scale * resid.norm_sq();
    if lambda2 > 0.0 {
        let d_out = resid.map(|r| 2.0 * scale * weight * r);
        backward(&fw, x_t, &d_out, p, grad);
    }
    Ok(loss)
}

/// Joint objective for one sample:
///
/// ```text
/// x_t  = sqrt(ᾱ_t)·x₀ + sqrt(1 − ᾱ_t)·ε
/// x̂_t  = sqrt(ᾱ_t)·F_φ(x_t, M, t) + sqrt(1 − ᾱ_t)·ε
/// loss = λ₁·mean((ε − ε_θ(x̂_t, t))²) + λ₂·mean((F_φ(x_t, M, t) − M⊙x₀)²)
/// ```
#[allow(clippy::too_many_arguments)]
pub fn farm_loss(
    x0: &Tensor,
    m: &AnomalyMask,
    t: usize,
    eps: &Tensor,
    denoiser: &dyn Denoiser,
    p: &FarmParams,
    cfg: &TrainingConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    sched.check_t(t, 1)?;
    let x_t = forward_marginal(sched, x0, t, eps)?;
    let recon = farm_reconstruct(&x_t, m, t, p)?;
    let target = masked_target(x0, m)?;
    let mut loss = cfg.lambda2 * recon.lincomb(1.0, &target, -1.0)?.norm_sq() / recon.len() as f64;
    if cfg.lambda1 > 0.0 {
        let x_hat = forward_marginal(sched, &recon, t, eps)?;
        let eps_hat = denoiser.predict_eps(&x_hat, t)?;
        eps.ensure_same_shape(&eps_hat)?;
        loss += cfg.lambda1 * eps.lincomb(1.0, &eps_hat, -1.0)?.norm_sq() / eps.len() as f64;
    }
    Ok(loss)
}

/// Mean squared reconstruction error restricted to masked pixels, averaged over
/// `samples` (each `(x0, M, t, ε)`).
pub fn masked_region_mse(
    samples: &[(Tensor, AnomalyMask, usize, Tensor)],
    sched: &NoiseSchedule,
    p: &FarmParams,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (x0, m, t, eps) in samples {
        let x_t = forward_marginal(sched, x0, *t, eps)?;
        let recon = farm_reconstruct(&x_t, m, *t, p)?;
        for c in 0..x0.channels() {
            for i in 0..x0.height() {
                for j in 0..x0.width() {
                    if m.is_set(i, j) {
                        sum += (recon.get(c, i, j) - x0.get(c, i, j)).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Train FARM with Adam on the reconstruction objective: per sample draw
/// `t ~ Uniform{1..T}`, `ε ~ N(0, I)`, noise `x₀` to `x_t`, regress onto `M⊙x₀`.
pub fn farm_train(
    dataset: &[(Tensor, AnomalyMask)],
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
    dims: FarmDims,
) -> Result<(FarmParams, TrainLog)> {
    let (first, _) = dataset.first().ok_or(Error::EmptyDataset)?;
    cfg.validate()?;
    if first.channels() != dims.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![dims.channels],
            actual: vec![first.channels()],
        });
    }
    for (x, m) in dataset {
        first.ensure_same_shape(x)?;
        m.ensure_matches(x)?;
    }
    let mut params = FarmParams::init(dims, cfg.seed)?;
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut rng = RandomStream::new(cfg.seed, 1);
    let mut log = TrainLog::default();
    let mut grad = vec![0.0; params.len()];
    let weight = 1.0 / cfg.batch as f64;
    for iteration in 0..cfg.iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (x0, m) = &dataset[rng.uniform_int(0, dataset.len() - 1)];
            let t = rng.uniform_int(1, sched.steps());
            let eps = rng.gaussian_like(x0);
            let x_t = forward_marginal(sched, x0, t, &eps)?;
            loss += weight * accumulate_reconstruction(&x_t, x0, m, t, &params, cfg.lambda2, weight, &mut grad)?;
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                param_norm: params.norm(),
            });
        }
        log.losses.push(loss);
        opt.update(params.as_mut_slice(), &grad);
    }
    Ok((params, log))
}
