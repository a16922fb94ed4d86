use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::{latent_frames, Codec, CodecConfig, BLOCK_FRAMES};
use crate::nn::{self, NamedTensors};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Training windows span `1 + 4 * window_blocks` frames.
    pub window_blocks: usize,
    /// Windows averaged per step.
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Cosine decay from `lr` down to `lr * min_lr_frac` over the run.
    #[serde(default = "one_f")]
    pub min_lr_frac: f64,
    pub kl_weight: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            window_blocks: 2,
            batch_size: 4,
            min_lr_frac: 0.1,
            kl_weight: 1e-4,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub losses: Vec<(usize, f64)>,
    pub val_mse: Vec<f64>,
    pub latent_scale: f64,
    pub recon_bound: f64,
}

/// Per-pixel reconstruction MSE of a clip `(T, 3, H, W)` through encode/decode.
pub fn recon_mse(codec: &Codec, clip: &Tensor) -> Result<f64> {
    let rec = codec.decode(&codec.encode(clip)?)?;
    Ok(nn::scalar(&(rec - clip)?.sqr()?.mean_all()?)?)
}

/// Trains a codec on clips `(T, 3, H, W)` with reconstruction plus a small
/// KL term, then fixes the latent scale and the held-out error bound.
pub fn train_codec(
    config: CodecConfig,
    tc: &CodecTrainConfig,
    train: &[Tensor],
    val: &[Tensor],
    device: &candle_core::Device,
) -> Result<(Codec, NamedTensors, CodecTrainReport)> {
    if train.is_empty() {
        return Err(Error::Config("codec training needs at least one clip".into()));
    }
    let (mut codec, varmap) = Codec::init(config, tc.seed, device)?;
    let vars = varmap.all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: tc.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = SeededRng::new(tc.seed ^ 0xc0dec);
    let window = 1 + BLOCK_FRAMES * tc.window_blocks;
    let mut losses = Vec::new();
    let batch = tc.batch_size.max(1);
    for step in 0..tc.steps {
        let progress = step as f64 / tc.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.set_learning_rate(tc.lr * (tc.min_lr_frac + (1.0 - tc.min_lr_frac) * cosine));
        let mut total: Option<Tensor> = None;
        for _ in 0..batch {
            let clip = &train[rng.below(train.len())];
            let t = clip.dim(0)?;
            latent_frames(t)?;
            let x = if t > window {
                // windows start on a block boundary so the bootstrap slot is real
                let start = BLOCK_FRAMES * rng.below((t - window) / BLOCK_FRAMES + 1);
                clip.narrow(0, start, window)?
            } else {
                clip.clone()
            };
            let (mean, logvar) = codec.encode_raw(&x)?;
            let (z, kl) = match logvar {
                Some(lv) => {
                    let eps = rng.normal(mean.shape(), device)?;
                    let z = (&mean + (lv.affine(0.5, 0.0)?.exp()? * eps)?)?;
                    let kl = ((mean.sqr()? + lv.exp()? - &lv)? - 1.0)?.mean_all()?.affine(0.5, 0.0)?;
                    (z, kl)
                }
                None => (mean.clone(), mean.sqr()?.mean_all()?.affine(0.5, 0.0)?),
            };
            let rec = codec.decode_raw(&z)?;
            let mse = (rec - &x)?.sqr()?.mean_all()?;
            let l = (&mse + (kl * tc.kl_weight)?)?;
            total = Some(match total.take() {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let loss = (total.expect("batch is at least one window") / batch as f64)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "codec".into(),
                step,
                detail: format!("loss {value}"),
            });
        }
        nn::clipped_step(&mut opt, &vars, &loss, tc.grad_clip)?;
        if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps) {
            tracing::info!(step, loss = value, "codec");
            losses.push((step, value));
        }
    }

    // unit-variance latents keep the diffusion noise scale meaningful
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for clip in train.iter().take(32) {
        let (mean, _) = codec.encode_raw(clip)?;
        let v = mean.flatten_all()?.to_vec1::<f32>()?;
        n += v.len();
        for x in v {
            sum += x as f64;
            sq += (x as f64) * (x as f64);
        }
    }
    let mu = sum / n as f64;
    let std = (sq / n as f64 - mu * mu).max(1e-8).sqrt();
    let tensors = nn::snapshot(&varmap)?;
    codec.refresh_id(&tensors)?;
    codec.meta_mut().latent_scale = 1.0 / std;

    let held_out = if val.is_empty() { train } else { val };
    let val_mse = held_out.iter().map(|c| recon_mse(&codec, c)).collect::<Result<Vec<_>>>()?;
    let recon_bound = 2.0 * val_mse.iter().cloned().fold(0.0, f64::max);
    codec.meta_mut().recon_bound = Some(recon_bound);
    let report = CodecTrainReport {
        losses,
        val_mse,
        latent_scale: 1.0 / std,
        recon_bound,
    };
    // frozen copy: encodings must not carry a graph back into training vars
    let frozen = Codec::from_tensors(codec.meta().clone(), &tensors, device)?;
    Ok((frozen, tensors, report))
}
