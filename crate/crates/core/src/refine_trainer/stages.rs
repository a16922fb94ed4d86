use candle_core::Device;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use serde_json::json;

use super::data::{BatchSampler, LatentBatch, LatentClip};
use super::{check_finite, MetricsLog, StageConfig};
use crate::causal_dit::{extend_input_channels, AttentionMode, CausalDit, DitConfig};
use crate::flow_diffusion::{diffusion_loss, LossConfig, VelocityModel};
use crate::nn::{self, NamedTensors};
use crate::rng::{derive_seed, SeededRng};
use crate::{Error, Result};

const VAL_STREAM: u64 = 0x7a1;

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: String,
    pub config: DitConfig,
    pub mode: AttentionMode,
    pub tensors: NamedTensors,
    pub train_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    /// Validation loss before any update of this stage.
    pub initial_val: f64,
    pub final_val: f64,
}

/// Mean diffusion loss over `val` with a fixed noise draw.
pub fn val_loss(
    model: &dyn VelocityModel,
    val: &[LatentClip],
    conditioned: bool,
    mode: AttentionMode,
    loss: &LossConfig,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::RejectedInput("empty validation split".into()));
    }
    let mut rng = SeededRng::new(derive_seed(seed, VAL_STREAM));
    let mut total = 0.0;
    for chunk in val.chunks(batch.max(1)) {
        let b = LatentBatch::new(&chunk.iter().collect::<Vec<_>>())?;
        let cond = conditioned.then_some(&b.cond);
        let l = diffusion_loss(model, &b.z, cond, mode, loss, &mut rng)?;
        total += nn::scalar(&l)? * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

struct Loop<'a> {
    stage: &'a str,
    mode: AttentionMode,
    cfg: &'a StageConfig,
    train: &'a [LatentClip],
    val: &'a [LatentClip],
}

impl Loop<'_> {
    fn val(&self, model: &CausalDit) -> Result<f64> {
        val_loss(
            model,
            self.val,
            model.config().conditioned,
            self.mode,
            &self.cfg.loss,
            self.cfg.batch_size,
            self.cfg.seed,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        model: &CausalDit,
        varmap: &VarMap,
        steps: usize,
        offset: usize,
        log: &mut MetricsLog,
        train_curve: &mut Vec<(usize, f64)>,
        val_curve: &mut Vec<(usize, f64)>,
    ) -> Result<()> {
        let vars = varmap.all_vars();
        let mut opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: self.cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let seed = derive_seed(self.cfg.seed, offset as u64 + 1);
        let mut sampler = BatchSampler::new(self.train.len(), self.cfg.batch_size, seed);
        let mut rng = SeededRng::new(derive_seed(seed, 2));
        let conditioned = model.config().conditioned;
        for i in 0..steps {
            let step = offset + i;
            let batch = sampler.next_batch(self.train)?;
            let cond = conditioned.then_some(&batch.cond);
            let loss = diffusion_loss(model, &batch.z, cond, self.mode, &self.cfg.loss, &mut rng)?;
            let value = check_finite(self.stage, step, "loss", nn::scalar(&loss)?)?;
            let grad_norm = nn::clipped_step(&mut opt, &vars, &loss, self.cfg.grad_clip).map_err(|e| match e {
                Error::Numerical(detail) => Error::Diverged {
                    stage: self.stage.into(),
                    step,
                    detail,
                },
                other => other,
            })?;
            train_curve.push((step, value));
            log.record(json!({"stage": self.stage, "step": step, "loss": value, "grad_norm": grad_norm}))?;
            let last = i + 1 == steps;
            if self.cfg.val_every > 0 && ((step + 1) % self.cfg.val_every == 0 || last) && conditioned {
                let v = check_finite(self.stage, step, "val_loss", self.val(model)?)?;
                val_curve.push((step + 1, v));
                log.record(json!({"stage": self.stage, "step": step + 1, "val_loss": v}))?;
                tracing::info!(stage = self.stage, step = step + 1, train = value, val = v, "validation");
            }
        }
        Ok(())
    }
}

/// Bidirectional teacher: an unconditional warm-up, then zero-initialized
/// conditioning channels and conditioned training.
pub fn train_stage1_teacher(
    train: &[LatentClip],
    val: &[LatentClip],
    dit: &DitConfig,
    cfg: &StageConfig,
    device: &Device,
    log: &mut MetricsLog,
) -> Result<StageResult> {
    if train.is_empty() {
        return Err(Error::RejectedInput("empty training split".into()));
    }
    let lp = Loop {
        stage: "teacher",
        mode: AttentionMode::Bidirectional,
        cfg,
        train,
        val,
    };
    let mut base = dit.clone();
    base.conditioned = false;
    let (uncond, uvars) = CausalDit::trainable(base.clone(), None, derive_seed(cfg.seed, 11), device)?;
    let (ccfg, init) = extend_input_channels(&base, &nn::snapshot(&uvars)?)?;
    let initial_val = lp.val(&CausalDit::from_tensors(ccfg.clone(), &init, device)?)?;

    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    lp.run(&uncond, &uvars, cfg.pretrain_steps, 0, log, &mut train_curve, &mut val_curve)?;
    let (ccfg, tensors) = extend_input_channels(&base, &nn::snapshot(&uvars)?)?;
    let (model, vars) = CausalDit::trainable(ccfg.clone(), Some(&tensors), 0, device)?;
    lp.run(&model, &vars, cfg.steps, cfg.pretrain_steps, log, &mut train_curve, &mut val_curve)?;
    let final_val = lp.val(&model)?;
    Ok(StageResult {
        stage: "teacher".into(),
        config: ccfg,
        mode: AttentionMode::Bidirectional,
        tensors: nn::snapshot(&vars)?,
        train_curve,
        val_curve,
        initial_val,
        final_val,
    })
}

/// Causal student initialized from teacher weights and trained with
/// teacher forcing and independent per-frame noise levels.
pub fn train_stage2_causal(
    teacher_config: &DitConfig,
    teacher: &NamedTensors,
    train: &[LatentClip],
    val: &[LatentClip],
    cfg: &StageConfig,
    device: &Device,
    log: &mut MetricsLog,
) -> Result<StageResult> {
    let lp = Loop {
        stage: "causal",
        mode: AttentionMode::Causal,
        cfg,
        train,
        val,
    };
    let (model, vars) = CausalDit::trainable(teacher_config.clone(), Some(teacher), 0, device)?;
    let initial_val = lp.val(&model)?;
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    lp.run(&model, &vars, cfg.steps, 0, log, &mut train_curve, &mut val_curve)?;
    let final_val = lp.val(&model)?;
    Ok(StageResult {
        stage: "causal".into(),
        config: teacher_config.clone(),
        mode: AttentionMode::Causal,
        tensors: nn::snapshot(&vars)?,
        train_curve,
        val_curve,
        initial_val,
        final_val,
    })
}
