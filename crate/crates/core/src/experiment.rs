//! End-to-end pipeline: data, codec, probe, the three training stages,
//! checkpoint persistence and evaluation, at a CI or desk scale.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::causal_dit::{build_condition, AttentionMode, CausalDit, DitConfig};
use crate::checkpoint::{CheckpointMeta, CheckpointStore};
use crate::eval_metrics::{clip_stats, evaluate_checkpoint, evaluate_videos, frechet_distance, train_probe, EvalReport, Probe, ProbeConfig, ProbeReport};
use crate::flow_diffusion::sample_sequence_ode;
use crate::latent_codec::{train_codec, Codec, CodecConfig, CodecKind, CodecMeta, CodecTrainConfig, CodecTrainReport, LatentSequence};
use crate::nn::NamedTensors;
use crate::refine_trainer::{
    train_stage1_teacher, train_stage2_causal, train_stage3_refine, LatentClip, MetricsLog, RefineConfig, RefineOutcome,
    StageConfig, StageResult,
};
use crate::rng::{derive_seed, SeededRng};
use crate::sprite_world::{generate_dataset, Clip, DatasetSpec, Split};
use crate::stream_engine::{loop_control, run_offline_control, Generator, SessionOptions};
use crate::{Error, Result};

/// Sub-seed kept to 63 bits so configs survive TOML's signed integers.
fn config_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream) >> 1
}

pub const SCALE_ENV: &str = "INTERPLAY_ACCEPTANCE_SCALE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Minutes on one CPU core.
    Ci,
    /// 64x64, T=33, 650 clips; hours on a desk GPU.
    Desk,
}

impl Scale {
    /// Reads `INTERPLAY_ACCEPTANCE_SCALE` (`ci` or `desk`); defaults to `ci`.
    pub fn from_env() -> Self {
        match std::env::var(SCALE_ENV).as_deref() {
            Ok("desk") => Scale::Desk,
            _ => Scale::Ci,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub dit: DitConfig,
    pub teacher: StageConfig,
    pub causal: StageConfig,
    pub refine: RefineConfig,
    pub probe: ProbeConfig,
    /// Euler steps of the bidirectional teacher's sampler.
    pub teacher_sample_steps: usize,
    pub loop_repeats: usize,
}

impl ExperimentConfig {
    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(seed),
            Scale::Ci => Self::ci(seed),
        }
    }

    pub fn desk(seed: u64) -> Self {
        let mut codec = CodecConfig::new(CodecKind::Causal3d);
        codec.latent_channels = 8;
        let stage = |steps, pretrain, s| StageConfig {
            steps,
            pretrain_steps: pretrain,
            seed: config_seed(seed, s),
            ..Default::default()
        };
        Self {
            scale: Scale::Desk,
            seed,
            dataset: DatasetSpec::default(),
            codec,
            codec_train: CodecTrainConfig::default(),
            dit: DitConfig::desk(),
            teacher: stage(4000, 1000, 1),
            causal: stage(4000, 0, 2),
            refine: RefineConfig {
                seed: config_seed(seed, 3),
                ..Default::default()
            },
            probe: ProbeConfig::default(),
            teacher_sample_steps: 16,
            loop_repeats: 5,
        }
    }

    pub fn ci(seed: u64) -> Self {
        let codec = CodecConfig::small(CodecKind::Tiny);
        let mut dit = DitConfig::tiny(4);
        dit.latent_channels = codec.latent_channels;
        dit.width = 64;
        dit.heads = 2;
        let stage = |steps, pretrain, s| StageConfig {
            steps,
            pretrain_steps: pretrain,
            batch_size: 8,
            lr: 1e-3,
            val_every: 100,
            seed: config_seed(seed, s),
            ..Default::default()
        };
        Self {
            scale: Scale::Ci,
            seed,
            dataset: DatasetSpec {
                deformable: 32,
                articulated: 32,
                creature: 32,
                frames: 17,
                height: 32,
                width: 32,
                seed: 0,
            },
            codec,
            codec_train: CodecTrainConfig {
                steps: 1500,
                lr: 1e-3,
                log_every: 100,
                window_blocks: 1,
                batch_size: 1,
                ..Default::default()
            },
            dit,
            teacher: stage(600, 200, 1),
            causal: stage(400, 0, 2),
            refine: RefineConfig {
                grad_frames_k: 3,
                steps: 360,
                batch_size: 4,
                lr_generator: 2e-4,
                lr_critic: 4e-4,
                ema_decay: 0.9,
                seed: config_seed(seed, 3),
                ..Default::default()
            },
            probe: ProbeConfig {
                steps: 300,
                batch_size: 32,
                ..Default::default()
            },
            teacher_sample_steps: 8,
            loop_repeats: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec.latent_channels != self.dit.latent_channels {
            return Err(Error::Config(format!(
                "codec has {} latent channels, transformer expects {}",
                self.codec.latent_channels, self.dit.latent_channels
            )));
        }
        let f = crate::latent_codec::SPATIAL_FACTOR;
        if self.dataset.height / f != self.dit.latent_height || self.dataset.width / f != self.dit.latent_width {
            return Err(Error::Config("frame size does not match the transformer's latent grid".into()));
        }
        self.dit.validate()?;
        self.refine.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

pub fn generate_corpus(spec: &DatasetSpec) -> Result<Corpus> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (entry, clip) in generate_dataset(spec)? {
        match entry.split {
            Split::Train => train.push(clip),
            Split::Val => val.push(clip),
        }
    }
    Ok(Corpus { train, val })
}

/// Codec, probe and encoded latents shared by every training seed.
pub struct Foundation {
    pub codec: Codec,
    pub codec_tensors: NamedTensors,
    pub codec_report: CodecTrainReport,
    pub probe: Probe,
    pub probe_tensors: NamedTensors,
    pub probe_report: ProbeReport,
    pub train: Vec<LatentClip>,
    pub val: Vec<LatentClip>,
}

pub fn build_foundation(cfg: &ExperimentConfig, corpus: &Corpus, device: &Device) -> Result<Foundation> {
    cfg.validate()?;
    let tensors = |clips: &[Clip]| clips.iter().map(|c| c.target.to_tensor(device)).collect::<Result<Vec<_>>>();
    let (codec, codec_tensors, codec_report) =
        train_codec(cfg.codec.clone(), &cfg.codec_train, &tensors(&corpus.train)?, &tensors(&corpus.val)?, device)?;
    tracing::info!(codec = codec.id(), bound = codec_report.recon_bound, "codec trained");
    let (probe, probe_tensors, probe_report) = train_probe(&cfg.probe, &corpus.train, device)?;
    tracing::info!(frame_acc = probe_report.frame_accuracy, clip_acc = probe_report.clip_accuracy, "probe trained");
    let encode = |clips: &[Clip]| clips.iter().map(|c| LatentClip::encode(&codec, c)).collect::<Result<Vec<_>>>();
    let train = encode(&corpus.train)?;
    let val = encode(&corpus.val)?;
    Ok(Foundation {
        codec,
        codec_tensors,
        codec_report,
        probe,
        probe_tensors,
        probe_report,
        train,
        val,
    })
}

pub struct Stages {
    pub teacher: StageResult,
    pub causal: StageResult,
}

pub fn train_teacher_and_causal(cfg: &ExperimentConfig, f: &Foundation, device: &Device, log: &mut MetricsLog) -> Result<Stages> {
    let teacher = train_stage1_teacher(&f.train, &f.val, &cfg.dit, &cfg.teacher, device, log)?;
    tracing::info!(initial = teacher.initial_val, fin = teacher.final_val, "teacher trained");
    let causal = train_stage2_causal(&teacher.config, &teacher.tensors, &f.train, &f.val, &cfg.causal, device, log)?;
    tracing::info!(initial = causal.initial_val, fin = causal.final_val, "causal student trained");
    Ok(Stages { teacher, causal })
}

pub fn refine(cfg: &RefineConfig, stages: &Stages, f: &Foundation, device: &Device, log: &mut MetricsLog) -> Result<RefineOutcome> {
    train_stage3_refine(
        &stages.causal.config,
        &stages.causal.tensors,
        &stages.teacher.tensors,
        &f.train,
        cfg,
        device,
        log,
    )
}

/// Session-ready generator from transformer weights and the foundation's codec.
pub fn generator(f: &Foundation, dit: &DitConfig, tensors: &NamedTensors) -> Result<Arc<Generator>> {
    let dev = f.codec.device();
    let codec = Codec::from_tensors(f.codec.meta().clone(), &f.codec_tensors, dev)?;
    let model = CausalDit::from_tensors(dit.clone(), tensors, dev)?;
    let id = codec.id().to_string();
    Ok(Generator::new(codec, model, id))
}

/// Whole-sequence sample of the bidirectional teacher, decoded to pixels.
pub fn teacher_generate(codec: &Codec, teacher: &CausalDit, clip: &Clip, steps: usize, seed: u64) -> Result<Tensor> {
    let first = codec.encode_video(&clip.first_frame.as_video())?.latents;
    let control = codec.encode_video(&clip.control)?;
    let cond = build_condition(&first, &control.latents.unsqueeze(0)?)?;
    let mut rng = SeededRng::new(seed);
    let z = sample_sequence_ode(
        teacher,
        &first,
        control.latents.dim(0)?,
        Some(&cond),
        AttentionMode::Bidirectional,
        steps,
        &mut rng,
    )?;
    let seq = LatentSequence {
        latents: z.squeeze(0)?,
        frames: clip.meta.frames,
        height: clip.meta.height,
        width: clip.meta.width,
        codec_id: codec.id().to_string(),
    };
    codec.decode(&seq)
}

pub fn evaluate_teacher(label: &str, cfg: &ExperimentConfig, f: &Foundation, teacher: &StageResult, clips: &[Clip], seed: u64) -> Result<EvalReport> {
    let model = CausalDit::from_tensors(teacher.config.clone(), &teacher.tensors, f.codec.device())?;
    let generated = clips
        .iter()
        .enumerate()
        .map(|(i, c)| teacher_generate(&f.codec, &model, c, cfg.teacher_sample_steps, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_videos(label, &f.probe, clips, &generated)
}

pub fn evaluate_causal(label: &str, f: &Foundation, dit: &DitConfig, tensors: &NamedTensors, clips: &[Clip], seed: u64) -> Result<EvalReport> {
    evaluate_checkpoint(label, generator(f, dit, tensors)?, &f.probe, clips, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongHorizonReport {
    pub frames: usize,
    pub segment: usize,
    pub all_finite: bool,
    pub first_segment_fvd: f64,
    pub last_segment_fvd: f64,
}

/// Generates every clip under a forward-backward looped control and
/// compares the first and last `T`-frame segments with real targets.
pub fn long_horizon(f: &Foundation, generator: Arc<Generator>, clips: &[Clip], repeats: usize, seed: u64) -> Result<LongHorizonReport> {
    if clips.is_empty() {
        return Err(Error::RejectedInput("no clips for the long-horizon run".into()));
    }
    let dev = f.codec.device();
    let seg = clips[0].meta.frames;
    let (mut first, mut last) = (Vec::new(), Vec::new());
    let mut all_finite = true;
    let mut frames = 0;
    for (i, clip) in clips.iter().enumerate() {
        let control = loop_control(&clip.control, repeats)?;
        let opts = SessionOptions {
            seed: derive_seed(seed, i as u64),
            ..Default::default()
        };
        let out = run_offline_control(generator.clone(), &clip.first_frame, &control, &opts)?;
        let v = out.frames.flatten_all()?.to_vec1::<f32>()?;
        all_finite &= v.iter().all(|x| x.is_finite());
        frames = out.frames.dim(0)?;
        first.push(out.frames.narrow(0, 0, seg)?);
        last.push(out.frames.narrow(0, frames - seg, seg)?);
    }
    let real = clips.iter().map(|c| c.target.to_tensor(dev)).collect::<Result<Vec<_>>>()?;
    let real_stats = clip_stats(&f.probe, &real.iter().collect::<Vec<_>>())?;
    let fvd = |v: &[Tensor]| frechet_distance(&clip_stats(&f.probe, &v.iter().collect::<Vec<_>>())?, &real_stats);
    Ok(LongHorizonReport {
        frames,
        segment: seg,
        all_finite,
        first_segment_fvd: fvd(&first)?,
        last_segment_fvd: fvd(&last)?,
    })
}

/// Ids of a persisted pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedPipeline {
    pub codec: String,
    pub probe: String,
    pub teacher: String,
    pub causal: String,
    pub refined: Option<String>,
    pub critic: Option<String>,
    pub discriminator: Option<String>,
}

fn curves(stage: &StageResult) -> BTreeMap<String, Vec<(usize, f64)>> {
    BTreeMap::from([
        ("train_loss".to_string(), stage.train_curve.clone()),
        ("val_loss".to_string(), stage.val_curve.clone()),
    ])
}

pub fn save_codec(store: &CheckpointStore, codec: &Codec, tensors: &NamedTensors) -> Result<String> {
    let mut meta = CheckpointMeta::new("codec", serde_json::to_value(codec.meta())?);
    meta.codec_id = Some(codec.id().to_string());
    store.save(&meta, tensors)
}

pub fn save_probe(store: &CheckpointStore, probe: &Probe, tensors: &NamedTensors) -> Result<String> {
    store.save(&CheckpointMeta::new("probe", serde_json::to_value(probe.config())?), tensors)
}

pub fn save_stage(store: &CheckpointStore, codec_id: &str, stage: &StageResult, parent: Option<&str>) -> Result<String> {
    let mut meta = CheckpointMeta::new("generator", serde_json::to_value(&stage.config)?);
    meta.stage = Some(stage.stage.clone());
    meta.step = stage.train_curve.last().map_or(0, |(s, _)| s + 1);
    meta.codec_id = Some(codec_id.to_string());
    meta.parent = parent.map(str::to_string);
    meta.metrics.insert("initial_val_loss".into(), stage.initial_val);
    meta.metrics.insert("final_val_loss".into(), stage.final_val);
    meta.curves = curves(stage);
    store.save(&meta, &stage.tensors)
}

pub fn save_refined(store: &CheckpointStore, codec_id: &str, dit: &DitConfig, cfg: &RefineConfig, out: &RefineOutcome, parent: &str) -> Result<(String, String, String)> {
    let mut meta = CheckpointMeta::new("generator", serde_json::to_value(dit)?);
    meta.stage = Some("refine".into());
    meta.step = out.records.len();
    meta.codec_id = Some(codec_id.to_string());
    meta.parent = Some(parent.to_string());
    meta.metrics.insert("generator_updates".into(), out.counts.generator as f64);
    meta.metrics.insert("critic_updates".into(), out.counts.critic as f64);
    for (name, key) in [("dmd", "dmd"), ("gan_g", "gan_g"), ("critic", "critic"), ("gan_d", "gan_d"), ("r1", "r1")] {
        let pts: Vec<(usize, f64)> = out.records.iter().filter_map(|r| r.losses.get(key).map(|v| (r.step, *v))).collect();
        if !pts.is_empty() {
            meta.curves.insert(name.into(), pts);
        }
    }
    let refined = store.save(&meta, &out.generator)?;
    let side = |kind: &str, tensors: &NamedTensors| {
        let mut m = CheckpointMeta::new(kind, json!({"refine": cfg, "dit": dit}));
        m.stage = Some("refine".into());
        m.codec_id = Some(codec_id.to_string());
        m.parent = Some(refined.clone());
        store.save(&m, tensors)
    };
    let critic = side("critic", &out.fake)?;
    let disc = side("discriminator", &out.discriminator)?;
    Ok((refined, critic, disc))
}

pub fn load_codec(store: &CheckpointStore, codec_id: &str, device: &Device) -> Result<Codec> {
    for e in store.list()?.iter().filter(|e| e.kind == "codec") {
        let meta = store.load_meta(&e.id)?;
        if meta.codec_id.as_deref() == Some(codec_id) {
            let (meta, tensors) = store.load(&e.id, device)?;
            return Codec::from_tensors(meta.config_as::<CodecMeta>()?, &tensors, device);
        }
    }
    Err(Error::Config(format!("no codec checkpoint with id {codec_id}")))
}

pub fn load_probe(store: &CheckpointStore, id: &str, device: &Device) -> Result<Probe> {
    let id = store.resolve(id).map_err(|e| Error::Config(format!("probe checkpoint: {e}")))?;
    let (meta, tensors) = store.load(&id, device)?;
    if meta.kind != "probe" {
        return Err(Error::Config(format!("checkpoint {id} is a {}, not a probe", meta.kind)));
    }
    Probe::from_tensors(meta.config_as()?, &tensors, device)
}

/// Generator checkpoint plus its codec, ready for sessions.
pub fn load_generator(store: &CheckpointStore, id: &str, device: &Device) -> Result<Arc<Generator>> {
    let id = store.resolve(id)?;
    let (meta, tensors) = store.load(&id, device)?;
    if meta.kind != "generator" {
        return Err(Error::Config(format!("checkpoint {id} is a {}, not a generator", meta.kind)));
    }
    let codec_id = meta
        .codec_id
        .clone()
        .ok_or_else(|| Error::Config(format!("checkpoint {id} records no codec")))?;
    let codec = load_codec(store, &codec_id, device)?;
    let model = CausalDit::from_tensors(meta.config_as()?, &tensors, device)?;
    Ok(Generator::new(codec, model, codec_id))
}

pub fn save_pipeline(
    store: &CheckpointStore,
    f: &Foundation,
    stages: &Stages,
    refined: Option<(&RefineConfig, &RefineOutcome)>,
) -> Result<SavedPipeline> {
    let codec = save_codec(store, &f.codec, &f.codec_tensors)?;
    let probe = save_probe(store, &f.probe, &f.probe_tensors)?;
    let cid = f.codec.id();
    let teacher = save_stage(store, cid, &stages.teacher, None)?;
    let causal = save_stage(store, cid, &stages.causal, Some(&teacher))?;
    let (refined, critic, disc) = match refined {
        Some((cfg, out)) => {
            let (r, c, d) = save_refined(store, cid, &stages.causal.config, cfg, out, &causal)?;
            (Some(r), Some(c), Some(d))
        }
        None => (None, None, None),
    };
    Ok(SavedPipeline {
        codec,
        probe,
        teacher,
        causal,
        refined,
        critic,
        discriminator: disc,
    })
}
