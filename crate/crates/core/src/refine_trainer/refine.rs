use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{linear, AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::{BatchSampler, LatentBatch, LatentClip};
use super::losses::{critic_error, d_loss, dmd_loss, draw_sigmas, g_loss, noise_sequence, r1_penalty};
use super::rollout::{rollout, DitRollout, RolloutResult};
use super::{check_finite, MetricsLog, RefineConfig};
use crate::causal_dit::{AttentionMode, CausalDit, DitConfig, DitInput};
use crate::flow_diffusion::noisify_frames;
use crate::nn::{self, NamedTensors};
use crate::rng::{derive_seed, SeededRng};
use crate::{Error, Result};

/// Adversarial head on the fake score's mid-depth token features: mean pool
/// per frame, two-layer MLP to a per-frame logit, mean over generated frames.
pub struct Discriminator {
    l1: Linear,
    l2: Linear,
    tokens: usize,
}

impl Discriminator {
    pub fn new(width: usize, hidden: usize, tokens: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            l1: linear(width, hidden, vb.pp("l1"))?,
            l2: linear(hidden, 1, vb.pp("l2"))?,
            tokens,
        })
    }

    /// Sequence logits `(B,)` from features `(B, T*n, D)`.
    pub fn logits(&self, mid: &Tensor) -> Result<Tensor> {
        let (b, len, d) = mid.dims3()?;
        let t = len / self.tokens;
        let pooled = mid.reshape((b, t, self.tokens, d))?.mean(2)?;
        let per_frame = self.l2.forward(&self.l1.forward(&pooled)?.silu()?)?.squeeze(2)?;
        Ok(per_frame.narrow(1, 1, t - 1)?.mean(1)?)
    }
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Generator,
    Critic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub losses: BTreeMap<String, f64>,
    pub sampled_grad_step: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub generator: usize,
    pub critic: usize,
}

/// Alternating generator / critic optimization.
pub struct RefineTrainer {
    cfg: RefineConfig,
    dit: DitConfig,
    g: CausalDit,
    g_map: VarMap,
    g_vars: Vec<Var>,
    opt_g: AdamW,
    fake: CausalDit,
    fake_map: VarMap,
    disc: Discriminator,
    d_map: VarMap,
    critic_vars: Vec<Var>,
    opt_c: AdamW,
    real: CausalDit,
    ema: NamedTensors,
    step: usize,
    rng: SeededRng,
    counts: UpdateCounts,
}

fn adamw(vars: Vec<Var>, lr: f64, wd: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: wd,
            ..Default::default()
        },
    )?)
}

impl RefineTrainer {
    /// `generator` holds the causal student's weights, `teacher` the
    /// frozen real score, which also initializes the fake score.
    pub fn new(dit: &DitConfig, generator: &NamedTensors, teacher: &NamedTensors, cfg: &RefineConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let (g, g_map) = CausalDit::trainable(dit.clone(), Some(generator), 0, device)?;
        let (fake, fake_map) = CausalDit::trainable(dit.clone(), Some(teacher), 0, device)?;
        let real = CausalDit::from_tensors(dit.clone(), teacher, device)?;
        let d_map = VarMap::new();
        let disc = Discriminator::new(
            dit.width,
            dit.width,
            dit.tokens_per_frame(),
            VarBuilder::from_varmap(&d_map, DType::F32, device),
        )?;
        nn::seeded_init(&d_map, derive_seed(cfg.seed, 0xd15c))?;
        let g_vars = g_map.all_vars();
        let mut critic_vars = fake_map.all_vars();
        critic_vars.extend(d_map.all_vars());
        Ok(Self {
            opt_g: adamw(g_vars.clone(), cfg.lr_generator, cfg.weight_decay)?,
            opt_c: adamw(critic_vars.clone(), cfg.lr_critic, cfg.weight_decay)?,
            ema: nn::snapshot(&g_map)?,
            cfg: cfg.clone(),
            dit: dit.clone(),
            g,
            g_map,
            g_vars,
            fake,
            fake_map,
            disc,
            d_map,
            critic_vars,
            real,
            step: 0,
            rng: SeededRng::new(derive_seed(cfg.seed, 0x5ef)),
            counts: UpdateCounts::default(),
        })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.cfg
    }

    pub fn counts(&self) -> UpdateCounts {
        self.counts
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn generator_params(&self) -> Result<NamedTensors> {
        nn::snapshot(&self.g_map)
    }

    pub fn fake_params(&self) -> Result<NamedTensors> {
        nn::snapshot(&self.fake_map)
    }

    pub fn disc_params(&self) -> Result<NamedTensors> {
        nn::snapshot(&self.d_map)
    }

    pub fn ema_params(&self) -> &NamedTensors {
        &self.ema
    }

    pub fn generator(&self) -> &CausalDit {
        &self.g
    }

    fn rollout(&mut self, batch: &LatentBatch, with_grad: bool) -> Result<RolloutResult> {
        let mut g = DitRollout::new(&self.g, Some(batch.cond.clone()));
        rollout(
            &mut g,
            &batch.bootstrap()?,
            batch.frames(),
            &self.cfg.schedule,
            self.cfg.grad_frames_k,
            with_grad,
            &mut self.rng,
        )
    }

    fn fake_logits(&self, noisy: &Tensor, sigma: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let out = self.fake.forward_with_features(
            &DitInput {
                noisy: noisy.clone(),
                cond: Some(cond.clone()),
                sigma: sigma.clone(),
            },
            AttentionMode::Bidirectional,
        )?;
        self.disc.logits(&out.mid)
    }

    /// One update of G with `λ_DMD · L_DMD + λ_G · L_G`.
    pub fn generator_step(&mut self, batch: &LatentBatch) -> Result<StepRecord> {
        let step = self.step;
        let roll = self.rollout(batch, true)?;
        let mut losses = BTreeMap::new();
        let mut total: Option<Tensor> = None;
        let mut add = |name: &str, w: f64, l: Tensor, losses: &mut BTreeMap<String, f64>| -> Result<()> {
            let v = check_finite("refine", step, name, nn::scalar(&l)?)?;
            losses.insert(name.to_string(), v);
            let term = (l * w)?;
            total = Some(match total.take() {
                Some(t) => (t + term)?,
                None => term,
            });
            Ok(())
        };
        if self.cfg.lambda_dmd > 0.0 {
            let l = dmd_loss(
                &self.real,
                &self.fake,
                &roll.latents,
                Some(&batch.cond),
                &roll.grad_mask,
                self.cfg.dmd_sigma,
                &mut self.rng,
            )?;
            add("dmd", self.cfg.lambda_dmd, l, &mut losses)?;
        }
        if self.cfg.lambda_gan_g > 0.0 {
            let (b, t) = (batch.size(), batch.frames());
            let sigma = draw_sigmas(b, t, self.cfg.critic_sigma, false, &mut self.rng, batch.z.device())?;
            let draw = noise_sequence(&roll.latents, &sigma, &mut self.rng)?;
            let logit = self.fake_logits(&draw.noisy, &sigma, &batch.cond)?;
            add("gan_g", self.cfg.lambda_gan_g, g_loss(&logit)?, &mut losses)?;
        }
        if let Some(total) = total {
            self.apply(StepKind::Generator, &total, step)?;
            self.update_ema()?;
        }
        self.counts.generator += 1;
        Ok(StepRecord {
            step,
            kind: StepKind::Generator,
            losses,
            sampled_grad_step: roll.sampled_grad_step,
        })
    }

    /// One update of the fake score and discriminator with
    /// `λ_critic · L_critic + λ_D · L_D + λ_R1 · L_R1`.
    pub fn critic_step(&mut self, batch: &LatentBatch) -> Result<StepRecord> {
        let step = self.step;
        let roll = self.rollout(batch, false)?;
        let z_hat = roll.latents.detach();
        let (b, t) = (batch.size(), batch.frames());
        let dev = batch.z.device().clone();
        let sigma = draw_sigmas(b, t, self.cfg.critic_sigma, false, &mut self.rng, &dev)?;
        let draw = noise_sequence(&z_hat, &sigma, &mut self.rng)?;
        let out = self.fake.forward_with_features(
            &DitInput {
                noisy: draw.noisy.clone(),
                cond: Some(batch.cond.clone()),
                sigma: sigma.clone(),
            },
            AttentionMode::Bidirectional,
        )?;
        let mut losses = BTreeMap::new();
        let mut terms = Vec::new();
        if self.cfg.lambda_critic > 0.0 {
            let l = critic_error(&out.velocity, &z_hat, &draw.eps)?;
            losses.insert("critic".into(), check_finite("refine", step, "critic", nn::scalar(&l)?)?);
            terms.push((l * self.cfg.lambda_critic)?);
        }
        if self.cfg.lambda_gan_d > 0.0 || self.cfg.lambda_r1 > 0.0 {
            let eps_real = self.rng.normal(batch.z.shape(), &dev)?;
            let mut r1_rng = self.rng.fork();
            let d_of = |x: &Tensor| -> Result<Tensor> {
                let noisy = noisify_frames(x, &sigma, &eps_real)?;
                self.fake_logits(&noisy, &sigma, &batch.cond)
            };
            if self.cfg.lambda_gan_d > 0.0 {
                let logit_fake = self.disc.logits(&out.mid)?;
                let l = d_loss(&d_of(&batch.z)?, &logit_fake)?;
                losses.insert("gan_d".into(), check_finite("refine", step, "gan_d", nn::scalar(&l)?)?);
                terms.push((l * self.cfg.lambda_gan_d)?);
            }
            if self.cfg.lambda_r1 > 0.0 {
                let prob = |x: &Tensor| sigmoid(&d_of(x)?);
                let l = r1_penalty(&prob, &batch.z, self.cfg.r1_sigma, &mut r1_rng)?;
                losses.insert("r1".into(), check_finite("refine", step, "r1", nn::scalar(&l)?)?);
                terms.push((l * self.cfg.lambda_r1)?);
            }
        }
        if let Some(first) = terms.first() {
            let mut total = first.clone();
            for t in &terms[1..] {
                total = (total + t)?;
            }
            self.apply(StepKind::Critic, &total, step)?;
        }
        self.counts.critic += 1;
        Ok(StepRecord {
            step,
            kind: StepKind::Critic,
            losses,
            sampled_grad_step: roll.sampled_grad_step,
        })
    }

    fn apply(&mut self, kind: StepKind, loss: &Tensor, step: usize) -> Result<()> {
        let res = match kind {
            StepKind::Generator => nn::clipped_step(&mut self.opt_g, &self.g_vars, loss, self.cfg.grad_clip),
            StepKind::Critic => nn::clipped_step(&mut self.opt_c, &self.critic_vars, loss, self.cfg.grad_clip),
        };
        res.map(|_| ()).map_err(|e| match e {
            Error::Numerical(detail) => Error::Diverged {
                stage: "refine".into(),
                step,
                detail,
            },
            other => other,
        })
    }

    fn update_ema(&mut self) -> Result<()> {
        let d = self.cfg.ema_decay;
        let data = self.g_map.data().lock().expect("varmap lock poisoned");
        for (name, var) in data.iter() {
            if let Some(e) = self.ema.get_mut(name) {
                *e = ((&*e * d)? + (var.as_tensor().detach() * (1.0 - d))?)?;
            }
        }
        Ok(())
    }

    /// Runs the step the alternation schedule assigns to the current counter.
    pub fn step(&mut self, batch: &LatentBatch) -> Result<StepRecord> {
        let rec = if self.cfg.is_generator_step(self.step) {
            self.generator_step(batch)?
        } else {
            self.critic_step(batch)?
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn dit_config(&self) -> &DitConfig {
        &self.dit
    }
}

pub struct RefineOutcome {
    /// EMA generator weights, used for inference.
    pub generator: NamedTensors,
    pub generator_raw: NamedTensors,
    pub fake: NamedTensors,
    pub discriminator: NamedTensors,
    pub counts: UpdateCounts,
    pub records: Vec<StepRecord>,
}

pub fn train_stage3_refine(
    dit: &DitConfig,
    causal: &NamedTensors,
    teacher: &NamedTensors,
    train: &[LatentClip],
    cfg: &RefineConfig,
    device: &Device,
    log: &mut MetricsLog,
) -> Result<RefineOutcome> {
    if train.is_empty() {
        return Err(Error::RejectedInput("empty training split".into()));
    }
    let mut trainer = RefineTrainer::new(dit, causal, teacher, cfg, device)?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, derive_seed(cfg.seed, 3));
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch(train)?;
        let rec = trainer.step(&batch)?;
        log.record(json!({"stage": "refine", "step": rec.step, "kind": rec.kind, "losses": rec.losses, "grad_step": rec.sampled_grad_step}))?;
        if rec.step % 50 == 0 {
            tracing::info!(step = rec.step, kind = ?rec.kind, losses = ?rec.losses, "refine");
        }
        records.push(rec);
    }
    Ok(RefineOutcome {
        generator: trainer.ema_params().clone(),
        generator_raw: trainer.generator_params()?,
        fake: trainer.fake_params()?,
        discriminator: trainer.disc_params()?,
        counts: trainer.counts(),
        records,
    })
}
