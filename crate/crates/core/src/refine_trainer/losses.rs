use candle_core::{DType, Device, Tensor};

use crate::causal_dit::{AttentionMode, DitInput};
use crate::flow_diffusion::{noisify_frames, velocity_target, VelocityModel};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// A noised copy of a latent sequence with its draw.
#[derive(Debug, Clone)]
pub struct NoisyDraw {
    /// `(B, T)`; frame 0 stays at 0.
    pub sigma: Tensor,
    pub eps: Tensor,
    pub noisy: Tensor,
}

/// One σ per sample, shared by frames `1..T`; the bootstrap frame stays clean.
pub fn draw_sigmas(b: usize, t: usize, range: (f64, f64), log_uniform: bool, rng: &mut SeededRng, device: &Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(b * t);
    for _ in 0..b {
        let s = if log_uniform {
            rng.log_uniform(range.0, range.1)
        } else {
            rng.uniform(range.0, range.1)
        };
        v.push(0f32);
        v.extend(std::iter::repeat_n(s as f32, t - 1));
    }
    Ok(Tensor::from_vec(v, (b, t), device)?)
}

pub fn noise_sequence(z: &Tensor, sigma: &Tensor, rng: &mut SeededRng) -> Result<NoisyDraw> {
    let eps = rng.normal(z.shape(), z.device())?;
    let noisy = noisify_frames(z, sigma, &eps)?;
    Ok(NoisyDraw {
        sigma: sigma.clone(),
        eps,
        noisy,
    })
}

fn frame_index(mask: &[bool], device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i as u32).collect();
    if idx.is_empty() {
        return Err(Error::RejectedInput("no frames selected".into()));
    }
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}

/// Distribution-matching loss on the frames flagged in `grad_mask`.
///
/// Both score networks see the same noised sequence and are treated as fixed
/// functions. The value is `½ E (f_fake - f_real)²` per element; the
/// gradient with respect to `z_hat` is `-(f_fake - f_real) / N`, which moves
/// samples toward the real score's denoised estimate.
pub fn dmd_loss(
    f_real: &dyn VelocityModel,
    f_fake: &dyn VelocityModel,
    z_hat: &Tensor,
    cond: Option<&Tensor>,
    grad_mask: &[bool],
    sigma_range: (f64, f64),
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (b, t, _, _, _) = z_hat.dims5()?;
    if grad_mask.len() != t {
        return Err(Error::RejectedInput(format!("mask of {} frames for {t} latents", grad_mask.len())));
    }
    let sigma = draw_sigmas(b, t, sigma_range, true, rng, z_hat.device())?;
    let draw = noise_sequence(&z_hat.detach(), &sigma, rng)?;
    let input = DitInput {
        noisy: draw.noisy,
        cond: cond.cloned(),
        sigma,
    };
    let v_real = f_real.velocity(&input, AttentionMode::Bidirectional)?.detach();
    let v_fake = f_fake.velocity(&input, AttentionMode::Bidirectional)?.detach();
    let idx = frame_index(grad_mask, z_hat.device())?;
    let delta = (v_fake - v_real)?.index_select(&idx, 1)?;
    let z_sel = z_hat.index_select(&idx, 1)?;
    let target = (z_sel.detach() + &delta)?.detach();
    Ok(((z_sel - target)?.sqr()?.mean_all()? * 0.5)?)
}

/// Denoising loss of the fake score on detached generator samples, over
/// every generated frame; returns the draw so adversarial terms can share it.
pub fn critic_loss(
    f_fake: &dyn VelocityModel,
    z_hat: &Tensor,
    cond: Option<&Tensor>,
    sigma_range: (f64, f64),
    rng: &mut SeededRng,
) -> Result<(Tensor, NoisyDraw)> {
    let z = z_hat.detach();
    let (b, t, _, _, _) = z.dims5()?;
    let sigma = draw_sigmas(b, t, sigma_range, false, rng, z.device())?;
    let draw = noise_sequence(&z, &sigma, rng)?;
    let input = DitInput {
        noisy: draw.noisy.clone(),
        cond: cond.cloned(),
        sigma: sigma.clone(),
    };
    let v = f_fake.velocity(&input, AttentionMode::Bidirectional)?;
    let loss = critic_error(&v, &z, &draw.eps)?;
    Ok((loss, draw))
}

pub(crate) fn critic_error(v: &Tensor, z: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let t = z.dim(1)?;
    let target = velocity_target(z, eps)?.narrow(1, 1, t - 1)?;
    Ok((v.narrow(1, 1, t - 1)? - target)?.sqr()?.mean_all()?)
}

/// `log(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Non-saturating discriminator loss from logits:
/// `E[-log D(real)] + E[-log(1 - D(fake))]` with `D = sigmoid(logit)`.
pub fn d_loss(logit_real: &Tensor, logit_fake: &Tensor) -> Result<Tensor> {
    Ok((softplus(&logit_real.neg()?)?.mean_all()? + softplus(logit_fake)?.mean_all()?)?)
}

/// Generator loss `E[-log D(fake)]` from logits.
pub fn g_loss(logit_fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&logit_fake.neg()?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanValues {
    pub d: f64,
    pub g: f64,
}

/// Both adversarial losses from discriminator probabilities, which must
/// lie strictly inside (0, 1).
pub fn gan_losses_from_probs(p_real: &[f64], p_fake: &[f64]) -> Result<GanValues> {
    if let Some(p) = p_real.iter().chain(p_fake).find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Contract(format!("discriminator output {p} outside (0, 1)")));
    }
    if p_real.is_empty() || p_fake.is_empty() {
        return Err(Error::RejectedInput("empty discriminator batch".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|x| f(*x)).sum::<f64>() / v.len() as f64;
    Ok(GanValues {
        d: mean(p_real, &|p| -p.ln()) + mean(p_fake, &|p| -(1.0 - p).ln()),
        g: mean(p_fake, &|p| -p.ln()),
    })
}

/// Approximate R1: `E ||D(x) - D(x + r1_sigma · η)||²` with `η ~ N(0, I)`.
pub fn r1_penalty(d: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, r1_sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if r1_sigma == 0.0 {
        return Ok(Tensor::zeros((), DType::F32, x.device())?);
    }
    let eta = rng.normal(x.shape(), x.device())?;
    let xp = (x + (eta * r1_sigma)?)?;
    Ok((d(x)? - d(&xp)?)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-100f32, -1.0, 0.0, 1.0, 100.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        let want = [0.0, (1.0 + (-1f32).exp()).ln(), 2f32.ln(), 1.0 + (1.0 + (-1f32).exp()).ln(), 100.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn probability_contract() {
        assert!(matches!(gan_losses_from_probs(&[1.0], &[0.5]), Err(Error::Contract(_))));
        assert!(matches!(gan_losses_from_probs(&[0.5], &[0.0]), Err(Error::Contract(_))));
        let v = gan_losses_from_probs(&[0.5, 0.5], &[0.5]).unwrap();
        assert!((v.d - 2.0 * 2f64.ln()).abs() < 1e-12 && (v.g - 2f64.ln()).abs() < 1e-12);
    }
}
