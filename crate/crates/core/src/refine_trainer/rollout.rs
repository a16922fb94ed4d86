use candle_core::{Shape, Tensor};

use crate::causal_dit::{CausalDit, DitInput, KvCache};
use crate::flow_diffusion::{commit_frame, denoise_frame, NoiseSchedule};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// A causal generator driven one frame and one denoising step at a time.
pub trait CausalStepModel {
    fn velocity(&mut self, frame: usize, step: usize, noisy: &Tensor, sigma: f64) -> Result<Tensor>;
    /// Records the finished frame as context for later frames.
    fn commit(&mut self, frame: usize, clean: &Tensor) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// `(B, T, C, h, w)`; frame 0 is the given bootstrap latent.
    pub latents: Tensor,
    pub grad_mask: Vec<bool>,
    /// Denoising step carrying gradient, 1-based.
    pub sampled_grad_step: usize,
}

/// Autoregressive rollout on the generator's own history.
///
/// One exit step `s*` is drawn uniformly per rollout and every frame is
/// denoised up to it. Only step `s*` of the last `grad_frames` frames keeps
/// its graph; the history fed back through `commit` is always detached.
pub fn self_forcing_rollout(
    g: &mut dyn CausalStepModel,
    bootstrap: &Tensor,
    frames: usize,
    schedule: &NoiseSchedule,
    grad_frames: usize,
    rng: &mut SeededRng,
) -> Result<RolloutResult> {
    rollout(g, bootstrap, frames, schedule, grad_frames, true, rng)
}

pub(crate) fn rollout(
    g: &mut dyn CausalStepModel,
    bootstrap: &Tensor,
    frames: usize,
    schedule: &NoiseSchedule,
    grad_frames: usize,
    with_grad: bool,
    rng: &mut SeededRng,
) -> Result<RolloutResult> {
    if frames < 2 {
        return Err(Error::Config("rollout needs at least one generated frame".into()));
    }
    if grad_frames == 0 || grad_frames > frames - 1 {
        return Err(Error::Config(format!(
            "grad_frames {grad_frames} outside 1..={}",
            frames - 1
        )));
    }
    let exit = rng.below(schedule.steps());
    let shape: Shape = bootstrap.shape().clone();
    let device = bootstrap.device().clone();
    g.commit(0, &bootstrap.detach())?;
    let mut out = vec![bootstrap.detach()];
    let mut grad_mask = vec![false; frames];
    for f in 1..frames {
        let keep = with_grad && f >= frames - grad_frames;
        grad_mask[f] = keep;
        let mut step_fn = |step: usize, noisy: &Tensor, sigma: f64| g.velocity(f, step, noisy, sigma);
        let z = denoise_frame(&mut step_fn, schedule, &shape, &device, exit, keep, rng, None)?;
        g.commit(f, &z.detach())?;
        out.push(z);
    }
    Ok(RolloutResult {
        latents: Tensor::cat(&out, 1)?,
        grad_mask,
        sampled_grad_step: exit + 1,
    })
}

/// Cached transformer as a step model; conditioning is `(B, T, 2C, h, w)`.
pub struct DitRollout<'a> {
    pub model: &'a CausalDit,
    pub cache: KvCache,
    pub cond: Option<Tensor>,
}

impl<'a> DitRollout<'a> {
    pub fn new(model: &'a CausalDit, cond: Option<Tensor>) -> Self {
        Self {
            model,
            cache: model.new_cache(),
            cond,
        }
    }

    fn cond_at(&self, frame: usize) -> Result<Option<Tensor>> {
        Ok(self.cond.as_ref().map(|c| c.narrow(1, frame, 1)).transpose()?)
    }
}

impl CausalStepModel for DitRollout<'_> {
    fn velocity(&mut self, frame: usize, _step: usize, noisy: &Tensor, sigma: f64) -> Result<Tensor> {
        if frame != self.cache.frames_cached() {
            return Err(Error::Protocol(format!(
                "velocity for frame {frame} with {} frames cached",
                self.cache.frames_cached()
            )));
        }
        let b = noisy.dim(0)?;
        let input = DitInput {
            noisy: noisy.clone(),
            cond: self.cond_at(frame)?,
            sigma: Tensor::full(sigma as f32, (b, 1), noisy.device())?,
        };
        self.model.forward_with_cache(&input, &self.cache)
    }

    fn commit(&mut self, frame: usize, clean: &Tensor) -> Result<()> {
        let cond = self.cond_at(frame)?;
        commit_frame(self.model, &mut self.cache, clean, cond.as_ref())
    }
}
