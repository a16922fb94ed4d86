//! Three training stages: a bidirectional teacher, a teacher-forced causal
//! student initialized from it, and self-forcing refinement of that student
//! with distribution matching, a fake-score critic and an adversarial head.

mod data;
mod losses;
mod refine;
mod rollout;
mod stages;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use data::{BatchSampler, LatentBatch, LatentClip};
pub use losses::{
    critic_loss, d_loss, dmd_loss, draw_sigmas, g_loss, gan_losses_from_probs, noise_sequence, r1_penalty, softplus,
    GanValues, NoisyDraw,
};
pub use refine::{train_stage3_refine, Discriminator, RefineOutcome, RefineTrainer, StepKind, StepRecord, UpdateCounts};
pub use rollout::{self_forcing_rollout, CausalStepModel, DitRollout, RolloutResult};
pub use stages::{train_stage1_teacher, train_stage2_causal, val_loss, StageResult};

use crate::error::IoContext;
use crate::flow_diffusion::{LossConfig, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    /// Unconditional warm-up before the conditioning channels are added
    /// (teacher stage only).
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub val_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            pretrain_steps: 1000,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            val_every: 250,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lambda_dmd: f64,
    pub lambda_critic: f64,
    pub lambda_gan_g: f64,
    pub lambda_gan_d: f64,
    pub lambda_r1: f64,
    pub generator_update_period: usize,
    /// Latent frames at the end of each rollout that carry gradient.
    pub grad_frames_k: usize,
    pub r1_sigma: f64,
    pub schedule: NoiseSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub ema_decay: f64,
    pub dmd_sigma: (f64, f64),
    pub critic_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda_dmd: 1.0,
            lambda_critic: 1.0,
            lambda_gan_g: 0.1,
            lambda_gan_d: 0.05,
            lambda_r1: 100.0,
            generator_update_period: 6,
            grad_frames_k: 8,
            r1_sigma: 0.01,
            schedule: NoiseSchedule::default(),
            steps: 3000,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_critic: 2e-4,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            ema_decay: 0.99,
            dmd_sigma: (0.02, 1.0),
            critic_sigma: (0.02, 1.0),
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_dmd,
            self.lambda_critic,
            self.lambda_gan_g,
            self.lambda_gan_d,
            self.lambda_r1,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {weights:?}")));
        }
        if self.generator_update_period == 0 {
            return Err(Error::Config("generator_update_period must be at least 1".into()));
        }
        if self.grad_frames_k == 0 {
            return Err(Error::Config("grad_frames_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    pub fn is_generator_step(&self, step: usize) -> bool {
        step % self.generator_update_period == 0
    }
}

/// Line-delimited JSON metrics, kept in memory and optionally appended to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    file: Option<fs::File>,
    pub records: Vec<serde_json::Value>,
}

impl MetricsLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            file: Some(file),
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{value}").map_err(|e| Error::Io {
                path: "metrics log".into(),
                source: e,
            })?;
        }
        tracing::debug!(%value, "metrics");
        self.records.push(value);
        Ok(())
    }
}

pub(crate) fn check_finite(stage: &str, step: usize, name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            step,
            detail: format!("{name} = {value}"),
        })
    }
}
