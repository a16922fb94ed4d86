//! Rectified-flow corruption `z̃ = (1-σ) z + σ ε` with velocity target
//! `ε - z`, the teacher and teacher-forcing losses, and few-step samplers.

use candle_core::{DType, Device, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::causal_dit::{AttentionMode, CausalDit, DitInput, KvCache};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Config("noise schedule is empty".into()));
        }
        if sigmas[0] != 1.0 {
            return Err(Error::Config(format!("schedule must start at 1.0, got {}", sigmas[0])));
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) || sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("schedule {sigmas:?} is not strictly decreasing in (0, 1]")));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 0.75, 0.5, 0.25],
        }
    }
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.sigmas
    }
}

pub fn noisify(z: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::RejectedInput(format!("sigma {sigma} outside [0, 1]")));
    }
    if z.dims() != eps.dims() {
        return Err(Error::RejectedInput(format!("noise {:?} vs latent {:?}", eps.dims(), z.dims())));
    }
    Ok(((z * (1.0 - sigma))? + (eps * sigma)?)?)
}

/// Interpolant with one σ per `(B, T)` frame for latents `(B, T, ...)`.
pub fn noisify_frames(z: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut s = sigma.clone();
    while s.rank() < z.rank() {
        s = s.unsqueeze(s.rank())?;
    }
    let one_minus = s.affine(-1.0, 1.0)?;
    Ok((z.broadcast_mul(&one_minus)? + eps.broadcast_mul(&s)?)?)
}

pub fn velocity_target(z: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((eps - z)?)
}

/// Anything that predicts velocities for whole latent sequences.
pub trait VelocityModel {
    fn velocity(&self, input: &DitInput, mode: AttentionMode) -> Result<Tensor>;
}

impl VelocityModel for CausalDit {
    fn velocity(&self, input: &DitInput, mode: AttentionMode) -> Result<Tensor> {
        self.forward(input, mode)
    }
}

impl<F: Fn(&DitInput, AttentionMode) -> Result<Tensor>> VelocityModel for F {
    fn velocity(&self, input: &DitInput, mode: AttentionMode) -> Result<Tensor> {
        self(input, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Keep frame 0 (the bootstrap latent) clean and out of the loss.
    pub clean_first: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.02,
            sigma_max: 1.0,
            clean_first: true,
        }
    }
}

/// Draws the per-frame noise levels `(B, T)` for a training example.
///
/// Bidirectional training shares one σ across a sample's frames; causal
/// training draws each frame independently.
pub fn sample_sigmas(b: usize, t: usize, mode: AttentionMode, cfg: &LossConfig, rng: &mut SeededRng, device: &Device) -> Result<Tensor> {
    let mut out = Vec::with_capacity(b * t);
    for _ in 0..b {
        let shared = rng.uniform(cfg.sigma_min, cfg.sigma_max);
        for f in 0..t {
            let s = if cfg.clean_first && f == 0 {
                0.0
            } else if mode == AttentionMode::Causal {
                rng.uniform(cfg.sigma_min, cfg.sigma_max)
            } else {
                shared
            };
            out.push(s as f32);
        }
    }
    Ok(Tensor::from_vec(out, (b, t), device)?)
}

/// Squared velocity error summed over each frame's elements and averaged
/// over the scored frames: `E ||v̂ - (ε - z)||²`.
pub fn frame_sq_error(pred: &Tensor, target: &Tensor, clean_first: bool) -> Result<Tensor> {
    let t = pred.dim(1)?;
    let (pred, target) = if clean_first {
        (pred.narrow(1, 1, t - 1)?, target.narrow(1, 1, t - 1)?)
    } else {
        (pred.clone(), target.clone())
    };
    let per_frame = (pred - target)?.sqr()?.flatten_from(2)?.sum(2)?;
    Ok(per_frame.mean_all()?)
}

/// Diffusion loss on clean latents `z` `(B, T, C, h, w)` with optional
/// conditioning; context frames are ground truth with their own noise.
pub fn diffusion_loss(
    model: &dyn VelocityModel,
    z: &Tensor,
    cond: Option<&Tensor>,
    mode: AttentionMode,
    cfg: &LossConfig,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (b, t, _, _, _) = z.dims5()?;
    if cfg.clean_first && t < 2 {
        return Err(Error::RejectedInput("loss needs at least one frame after the bootstrap".into()));
    }
    let sigma = sample_sigmas(b, t, mode, cfg, rng, z.device())?;
    let eps = rng.normal(z.shape(), z.device())?;
    let noisy = noisify_frames(z, &sigma, &eps)?;
    let input = DitInput {
        noisy,
        cond: cond.cloned(),
        sigma,
    };
    let pred = model.velocity(&input, mode)?;
    frame_sq_error(&pred, &velocity_target(z, &eps)?, cfg.clean_first)
}

/// Predicts the velocity of one frame at a schedule step.
pub trait FrameDenoiser {
    fn velocity(&mut self, step: usize, noisy: &Tensor, sigma: f64) -> Result<Tensor>;
}

impl<F: FnMut(usize, &Tensor, f64) -> Result<Tensor>> FrameDenoiser for F {
    fn velocity(&mut self, step: usize, noisy: &Tensor, sigma: f64) -> Result<Tensor> {
        self(step, noisy, sigma)
    }
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub sigma: f64,
    /// Noise used to build this step's input.
    pub eps: Tensor,
    pub noisy: Tensor,
    pub denoised: Tensor,
}

/// Few-step denoising of one frame, exiting after step `exit_step`.
///
/// Every step sees a detached input; only the exit step's prediction keeps
/// its graph, and only when `keep_grad` is set.
pub fn denoise_frame(
    model: &mut dyn FrameDenoiser,
    schedule: &NoiseSchedule,
    shape: &Shape,
    device: &Device,
    exit_step: usize,
    keep_grad: bool,
    rng: &mut SeededRng,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Tensor> {
    let sig = schedule.sigmas();
    if exit_step >= sig.len() {
        return Err(Error::Config(format!("exit step {exit_step} beyond {} steps", sig.len())));
    }
    let mut eps = rng.normal(shape.clone(), device)?;
    let mut noisy = (&eps * sig[0])?;
    let mut i = 0;
    loop {
        let v = model.velocity(i, &noisy, sig[i])?;
        let mut denoised = (&noisy - (v * sig[i])?)?;
        if i < exit_step || !keep_grad {
            denoised = denoised.detach();
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(StepTrace {
                step: i,
                sigma: sig[i],
                eps: eps.clone(),
                noisy: noisy.clone(),
                denoised: denoised.detach(),
            });
        }
        if i == exit_step {
            return Ok(denoised);
        }
        eps = rng.normal(shape.clone(), device)?;
        noisy = noisify(&denoised, sig[i + 1], &eps)?;
        i += 1;
    }
}

/// Full few-step sampling of one frame starting from pure noise.
pub fn sample_frame(
    model: &mut dyn FrameDenoiser,
    schedule: &NoiseSchedule,
    shape: &Shape,
    device: &Device,
    rng: &mut SeededRng,
    trace: Option<&mut Vec<StepTrace>>,
) -> Result<Tensor> {
    denoise_frame(model, schedule, shape, device, schedule.steps() - 1, false, rng, trace)
}

/// Cached causal transformer predicting one new frame `(B, 1, C, h, w)`.
pub struct CachedDenoiser<'a> {
    pub model: &'a CausalDit,
    pub cache: &'a KvCache,
    /// `(B, 1, 2C, h, w)` conditioning for the new frame.
    pub cond: Option<Tensor>,
}

impl FrameDenoiser for CachedDenoiser<'_> {
    fn velocity(&mut self, _step: usize, noisy: &Tensor, sigma: f64) -> Result<Tensor> {
        let b = noisy.dim(0)?;
        let input = DitInput {
            noisy: noisy.clone(),
            cond: self.cond.clone(),
            sigma: Tensor::full(sigma as f32, (b, 1), noisy.device())?,
        };
        self.model.forward_with_cache(&input, self.cache)
    }
}

/// Runs the clean frame through the model at σ = 0 and commits its keys
/// and values.
pub fn commit_frame(model: &CausalDit, cache: &mut KvCache, clean: &Tensor, cond: Option<&Tensor>) -> Result<()> {
    let b = clean.dim(0)?;
    let input = DitInput {
        noisy: clean.detach(),
        cond: cond.cloned(),
        sigma: Tensor::zeros((b, clean.dim(1)?), DType::F32, clean.device())?,
    };
    model.forward_cached(&input, cache, true)?;
    Ok(())
}

/// Euler integration of the probability-flow ODE from σ = 1 to 0 over a
/// whole sequence; frame 0 stays at the given clean bootstrap latent.
pub fn sample_sequence_ode(
    model: &dyn VelocityModel,
    bootstrap: &Tensor,
    frames: usize,
    cond: Option<&Tensor>,
    mode: AttentionMode,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if steps == 0 || frames < 2 {
        return Err(Error::Config("ODE sampling needs steps > 0 and frames > 1".into()));
    }
    let (b, c, h, w) = bootstrap.dims4()?;
    let dev = bootstrap.device();
    let first = bootstrap.unsqueeze(1)?;
    let mut x = rng.normal((b, frames - 1, c, h, w), dev)?;
    for k in 0..steps {
        let s = 1.0 - k as f64 / steps as f64;
        let s_next = 1.0 - (k + 1) as f64 / steps as f64;
        let mut sig = vec![s as f32; b * frames];
        for i in 0..b {
            sig[i * frames] = 0.0;
        }
        let input = DitInput {
            noisy: Tensor::cat(&[&first, &x], 1)?,
            cond: cond.cloned(),
            sigma: Tensor::from_vec(sig, (b, frames), dev)?,
        };
        let v = model.velocity(&input, mode)?.narrow(1, 1, frames - 1)?;
        x = (x + (v * (s_next - s))?)?;
    }
    Ok(Tensor::cat(&[&first, &x], 1)?)
}
