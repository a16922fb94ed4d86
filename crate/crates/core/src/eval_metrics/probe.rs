use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, loss, AdamW, Conv2d, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::nn::{self, NamedTensors};
use crate::rng::{derive_seed, SeededRng};
use crate::sprite_world::Clip;
use crate::{Error, Result};

/// Feature dimension of both probe paths.
pub const FEATURE_DIM: usize = 64;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub channels: [usize; 3],
    /// Frame gap of the clip path's frame pairs.
    pub pair_stride: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            pair_stride: 2,
            steps: 600,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

struct Net {
    convs: [Conv2d; 3],
    feat: Linear,
    head: Linear,
}

impl Net {
    fn new(cin: usize, ch: [usize; 3], vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            convs: [
                nn::conv(vb.pp("c0"), cin, ch[0], 3, 2)?,
                nn::conv(vb.pp("c1"), ch[0], ch[1], 3, 2)?,
                nn::conv(vb.pp("c2"), ch[1], ch[2], 3, 2)?,
            ],
            feat: linear(ch[2], FEATURE_DIM, vb.pp("feat"))?,
            head: linear(FEATURE_DIM, CLASSES + 2, vb.pp("head"))?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        Ok(self.feat.forward(&h.mean((2, 3))?)?.tanh()?)
    }
}

/// Small task-trained classifier of sprite class and contact state whose
/// hidden features stand in for Inception / I3D features.
pub struct Probe {
    config: ProbeConfig,
    frame: Net,
    clip: Net,
}

impl Probe {
    pub fn new(config: ProbeConfig, vb: VarBuilder) -> Result<Self> {
        if config.pair_stride == 0 {
            return Err(Error::Config("pair_stride must be at least 1".into()));
        }
        Ok(Self {
            frame: Net::new(3, config.channels, vb.pp("frame"))?,
            clip: Net::new(6, config.channels, vb.pp("clip"))?,
            config,
        })
    }

    pub fn from_tensors(config: ProbeConfig, tensors: &NamedTensors, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let probe = Self::new(config, VarBuilder::from_varmap(&varmap, DType::F32, device))?;
        nn::load_into(&varmap, tensors)?;
        Ok(probe)
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    fn pairs(&self, video: &Tensor) -> Result<Tensor> {
        let t = video.dim(0)?;
        let s = self.config.pair_stride;
        if t <= s {
            return Err(Error::RejectedInput(format!("clip path needs more than {s} frames, got {t}")));
        }
        let a = video.narrow(0, 0, t - s)?;
        let b = video.narrow(0, s, t - s)?;
        let d = (&b - &a)?;
        Ok(Tensor::cat(&[&a, &d], 1)?)
    }

    /// Per-frame features `(T, 64)` of a `(T, 3, H, W)` video.
    pub fn embed_frames(&self, video: &Tensor) -> Result<Tensor> {
        self.frame.features(video)
    }

    /// One `(64,)` feature per video, pooled over strided frame pairs.
    pub fn embed_clip(&self, video: &Tensor) -> Result<Tensor> {
        Ok(self.clip.features(&self.pairs(video)?)?.mean(0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub losses: Vec<(usize, f64)>,
    /// Class accuracy of the frame and clip paths on the training data.
    pub frame_accuracy: f64,
    pub clip_accuracy: f64,
}

fn labels(clip: &Clip, frames: &[usize]) -> (u32, Vec<u32>) {
    let class = clip.meta.sprite_class.index() as u32;
    let contact = frames
        .iter()
        .map(|&t| u32::from(clip.meta.contact.get(t).copied().unwrap_or(false)))
        .collect();
    (class, contact)
}

fn head_loss(net: &Net, x: &Tensor, class: &Tensor, contact: &Tensor) -> Result<(Tensor, Tensor)> {
    let logits = net.head.forward(&net.features(x)?)?;
    let lc = loss::cross_entropy(&logits.narrow(1, 0, CLASSES)?, class)?;
    let lk = loss::cross_entropy(&logits.narrow(1, CLASSES, 2)?, contact)?;
    Ok(((lc + lk)?, logits))
}

fn accuracy(logits: &Tensor, class: &Tensor) -> Result<f64> {
    let pred = logits.narrow(1, 0, CLASSES)?.argmax(D::Minus1)?;
    let hit = pred.eq(class)?.to_dtype(DType::F32)?.mean_all()?;
    nn::scalar(&hit)
}

fn tail_mean(v: &[f64]) -> f64 {
    let tail = &v[v.len().saturating_sub(20)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains both probe paths on target videos of `clips`.
pub fn train_probe(config: &ProbeConfig, clips: &[Clip], device: &Device) -> Result<(Probe, NamedTensors, ProbeReport)> {
    if clips.is_empty() {
        return Err(Error::RejectedInput("no clips to train the probe on".into()));
    }
    let varmap = VarMap::new();
    let probe = Probe::new(config.clone(), VarBuilder::from_varmap(&varmap, DType::F32, device))?;
    nn::seeded_init(&varmap, derive_seed(config.seed, 0x9b0))?;
    let vars = varmap.all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.lr,
            ..Default::default()
        },
    )?;
    let videos: Vec<Tensor> = clips.iter().map(|c| c.target.to_tensor(device)).collect::<Result<_>>()?;
    let mut rng = SeededRng::new(derive_seed(config.seed, 0x9b1));
    let s = config.pair_stride;
    let mut losses = Vec::new();
    let (mut fa, mut ca) = (Vec::new(), Vec::new());
    for step in 0..config.steps {
        let (mut fx, mut px, mut fcls, mut fcon, mut pcls, mut pcon) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..config.batch_size {
            let i = rng.below(clips.len());
            let t_len = videos[i].dim(0)?;
            let t = rng.below(t_len);
            let (c, k) = labels(&clips[i], &[t]);
            fx.push(videos[i].narrow(0, t, 1)?);
            fcls.push(c);
            fcon.push(k[0]);
            if t_len > s {
                let t0 = rng.below(t_len - s);
                let a = videos[i].narrow(0, t0, 1)?;
                let b = videos[i].narrow(0, t0 + s, 1)?;
                px.push(Tensor::cat(&[&a, &(&b - &a)?], 1)?);
                let (c, k) = labels(&clips[i], &[t0 + s]);
                pcls.push(c);
                pcon.push(k[0]);
            }
        }
        let n = fcls.len();
        let fcls = Tensor::from_vec(fcls, n, device)?;
        let (lf, logits_f) = head_loss(&probe.frame, &Tensor::cat(&fx, 0)?, &fcls, &Tensor::from_vec(fcon, n, device)?)?;
        let mut total = lf;
        if !px.is_empty() {
            let m = pcls.len();
            let pcls = Tensor::from_vec(pcls, m, device)?;
            let (lp, logits_p) = head_loss(&probe.clip, &Tensor::cat(&px, 0)?, &pcls, &Tensor::from_vec(pcon, m, device)?)?;
            total = (total + lp)?;
            ca.push(accuracy(&logits_p, &pcls)?);
        }
        fa.push(accuracy(&logits_f, &fcls)?);
        let value = nn::scalar(&total)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "probe".into(),
                step,
                detail: format!("loss = {value}"),
            });
        }
        opt.backward_step(&total)?;
        losses.push((step, value));
    }
    let tensors = nn::snapshot(&varmap)?;
    let probe = Probe::from_tensors(config.clone(), &tensors, device)?;
    Ok((
        probe,
        tensors,
        ProbeReport {
            losses,
            frame_accuracy: tail_mean(&fa),
            clip_accuracy: tail_mean(&ca),
        },
    ))
}
