use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use candle_core::{Device, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use interplay_core::causal_dit::AttentionMode;
use interplay_core::checkpoint::CheckpointStore;
use interplay_core::eval_metrics::{evaluate_checkpoint, evaluate_videos, train_probe, Probe};
use interplay_core::experiment::{load_codec, load_generator, load_probe, save_codec, save_probe, save_refined, save_stage};
use interplay_core::latent_codec::train_codec;
use interplay_core::refine_trainer::{train_stage1_teacher, train_stage2_causal, train_stage3_refine, LatentClip, MetricsLog, StageResult};
use interplay_core::sprite_world::{build_dataset, read_clip, read_index, write_frame_dir, Clip, Split};
use interplay_core::stream_engine::{loop_control, run_offline_control, Generator, SessionOptions};

use crate::config::Config;
use crate::server::{self, Backend};

#[derive(Parser, Debug)]
#[command(name = "interplay", version, about = "Streaming cursor-object interaction video generator")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `a.b.c=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the resolved configuration.
    Config,
    #[command(subcommand)]
    Data(DataCmd),
    #[command(subcommand)]
    Codec(CodecCmd),
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Run one training stage and store the result.
    Train(TrainArgs),
    /// Score a generator (or the ground truth) on a split.
    Eval(EvalArgs),
    /// Generate one clip, optionally with a looped control, to a PNG directory.
    Render(RenderArgs),
    Serve(ServeArgs),
    /// Streaming throughput and latency of a generator.
    Bench(BenchArgs),
    /// Stored checkpoints, or the lineage of one.
    List {
        #[arg(long)]
        lineage: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCmd {
    /// Write a synthetic dataset.
    Gen(DataGenArgs),
}

#[derive(Args, Debug)]
pub struct DataGenArgs {
    #[arg(long)]
    pub deformable: Option<usize>,
    #[arg(long)]
    pub articulated: Option<usize>,
    #[arg(long)]
    pub creature: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Defaults to `data_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum CodecCmd {
    Train,
}

#[derive(Subcommand, Debug)]
pub enum ProbeCmd {
    Train,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Causal,
    Refine,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Parent checkpoint: a codec for `teacher`, a teacher for `causal`, a
    /// causal student for `refine`. Defaults to the newest suitable one.
    #[arg(long)]
    pub from: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "ground_truth")]
    pub ckpt: Option<String>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Probe checkpoint; defaults to the newest one.
    #[arg(long)]
    pub probe: Option<String>,
    /// Score the split's own targets instead of a generator.
    #[arg(long)]
    pub ground_truth: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: String,
    #[arg(long)]
    pub clip: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Forward-backward control repeats.
    #[arg(long = "loop", default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, required_unless_present = "echo")]
    pub ckpt: Option<String>,
    /// Defaults to `serve.bind`.
    #[arg(long)]
    pub bind: Option<String>,
    /// Identity generator, no weights needed.
    #[arg(long)]
    pub echo: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: String,
    /// Val clip supplying the first frame and control; the first one if absent.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn init_tracing(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn load_split(root: &Path, split: Split) -> anyhow::Result<Vec<Clip>> {
    let index = read_index(root).with_context(|| format!("no dataset at {} (run `data gen`)", root.display()))?;
    let clips = index
        .iter()
        .filter(|e| e.split == split)
        .map(|e| read_clip(&root.join(&e.id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(clips)
}

fn targets(clips: &[Clip], dev: &Device) -> anyhow::Result<Vec<Tensor>> {
    Ok(clips.iter().map(|c| c.target.to_tensor(dev)).collect::<Result<_, _>>()?)
}

/// Newest checkpoint of `kind` (and `stage`, if given).
fn newest(store: &CheckpointStore, kind: &str, stage: Option<&str>) -> anyhow::Result<String> {
    store
        .list()?
        .into_iter()
        .rev()
        .find(|e| e.kind == kind && (stage.is_none() || e.stage.as_deref() == stage))
        .map(|e| e.id)
        .with_context(|| match stage {
            Some(s) => format!("no {s} checkpoint in the store"),
            None => format!("no {kind} checkpoint in the store"),
        })
}

fn load_stage(store: &CheckpointStore, id: &str, stage: &str, dev: &Device) -> anyhow::Result<StageResult> {
    let id = store.resolve(id)?;
    let (meta, tensors) = store.load(&id, dev)?;
    if meta.stage.as_deref() != Some(stage) {
        bail!("checkpoint {id} is not a {stage} checkpoint");
    }
    Ok(StageResult {
        stage: stage.into(),
        config: meta.config_as()?,
        mode: if stage == "teacher" { AttentionMode::Bidirectional } else { AttentionMode::Causal },
        tensors,
        train_curve: Vec::new(),
        val_curve: Vec::new(),
        initial_val: f64::NAN,
        final_val: f64::NAN,
    })
}

fn encode_all(store: &CheckpointStore, codec_id: &str, cfg: &Config, dev: &Device) -> anyhow::Result<(Vec<LatentClip>, Vec<LatentClip>)> {
    let codec = load_codec(store, codec_id, dev)?;
    let enc = |split| -> anyhow::Result<Vec<LatentClip>> {
        let clips = load_split(&cfg.data_dir, split)?;
        Ok(clips.iter().map(|c| LatentClip::encode(&codec, c)).collect::<Result<_, _>>()?)
    };
    Ok((enc(Split::Train)?, enc(Split::Val)?))
}

fn metrics_log(cfg: &Config) -> anyhow::Result<MetricsLog> {
    Ok(match &cfg.metrics_log {
        Some(p) => MetricsLog::to_file(p)?,
        None => MetricsLog::default(),
    })
}

fn probe_for(store: &CheckpointStore, id: Option<&str>, dev: &Device) -> anyhow::Result<Probe> {
    let id = match id {
        Some(id) => id.to_string(),
        None => newest(store, "probe", None).context("no probe checkpoint (run `probe train`)")?,
    };
    Ok(load_probe(store, &id, dev)?)
}

fn train(cfg: &Config, args: &TrainArgs, dev: &Device) -> anyhow::Result<()> {
    let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
    let mut log = metrics_log(cfg)?;
    let exp = &cfg.experiment;
    match args.stage {
        Stage::Teacher => {
            let codec_ckpt = match &args.from {
                Some(id) => store.resolve(id)?,
                None => newest(&store, "codec", None).context("no codec checkpoint (run `codec train`)")?,
            };
            let codec_id = store.load_meta(&codec_ckpt)?.codec_id.context("codec checkpoint records no codec id")?;
            let (tr, va) = encode_all(&store, &codec_id, cfg, dev)?;
            let r = train_stage1_teacher(&tr, &va, &exp.dit, &exp.teacher, dev, &mut log)?;
            let id = save_stage(&store, &codec_id, &r, None)?;
            println!("teacher {id} val {:.5} -> {:.5}", r.initial_val, r.final_val);
        }
        Stage::Causal => {
            let parent = match &args.from {
                Some(id) => store.resolve(id)?,
                None => newest(&store, "generator", Some("teacher"))?,
            };
            let codec_id = store.load_meta(&parent)?.codec_id.context("teacher records no codec")?;
            let teacher = load_stage(&store, &parent, "teacher", dev)?;
            let (tr, va) = encode_all(&store, &codec_id, cfg, dev)?;
            let r = train_stage2_causal(&teacher.config, &teacher.tensors, &tr, &va, &exp.causal, dev, &mut log)?;
            let id = save_stage(&store, &codec_id, &r, Some(&parent))?;
            println!("causal {id} val {:.5} -> {:.5}", r.initial_val, r.final_val);
        }
        Stage::Refine => {
            let parent = match &args.from {
                Some(id) => store.resolve(id)?,
                None => newest(&store, "generator", Some("causal"))?,
            };
            let meta = store.load_meta(&parent)?;
            let codec_id = meta.codec_id.context("causal checkpoint records no codec")?;
            let teacher_id = meta.parent.context("causal checkpoint records no teacher")?;
            let causal = load_stage(&store, &parent, "causal", dev)?;
            let teacher = load_stage(&store, &teacher_id, "teacher", dev)?;
            let (tr, _) = encode_all(&store, &codec_id, cfg, dev)?;
            let out = train_stage3_refine(&causal.config, &causal.tensors, &teacher.tensors, &tr, &exp.refine, dev, &mut log)?;
            let (r, c, d) = save_refined(&store, &codec_id, &causal.config, &exp.refine, &out, &parent)?;
            println!(
                "refined {r} (critic {c}, discriminator {d}) after {} generator / {} critic updates",
                out.counts.generator, out.counts.critic
            );
        }
    }
    Ok(())
}

fn eval(cfg: &Config, args: &EvalArgs, dev: &Device) -> anyhow::Result<()> {
    let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
    let probe = probe_for(&store, args.probe.as_deref(), dev)?;
    let mut clips = load_split(&cfg.data_dir, args.split.into())?;
    if let Some(n) = args.limit {
        clips.truncate(n);
    }
    let report = if args.ground_truth {
        evaluate_videos("ground truth", &probe, &clips, &targets(&clips, dev)?)?
    } else {
        let id = args.ckpt.as_deref().context("--ckpt is required")?;
        let gen = load_generator(&store, id, dev)?;
        evaluate_checkpoint(id, gen, &probe, &clips, args.seed)?
    };
    print!("{}", report.render_table());
    if let Some(p) = &args.json {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn find_clip(root: &Path, id: &str) -> anyhow::Result<Clip> {
    let dir = root.join(id);
    read_clip(&dir).with_context(|| format!("reading clip {}", dir.display()))
}

fn render(cfg: &Config, args: &RenderArgs, dev: &Device) -> anyhow::Result<()> {
    let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
    let gen = load_generator(&store, &args.ckpt, dev)?;
    let clip = find_clip(&cfg.data_dir, &args.clip)?;
    let control = loop_control(&clip.control, args.repeats)?;
    let opts = session_options(cfg, args.seed);
    let out = run_offline_control(gen, &clip.first_frame, &control, &opts)?;
    let video = out.video()?;
    write_frame_dir(&video, &args.out)?;
    println!("{} frames written to {}", video.frames, args.out.display());
    Ok(())
}

fn session_options(cfg: &Config, seed: u64) -> SessionOptions {
    SessionOptions {
        seed,
        window: cfg.serve.window,
        max_frames: cfg.serve.max_frames,
        ..Default::default()
    }
}

fn model_backend(cfg: &Config, ckpt: &str, dev: &Device) -> anyhow::Result<(Arc<Generator>, SessionOptions)> {
    let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
    Ok((load_generator(&store, ckpt, dev)?, session_options(cfg, 0)))
}

fn serve(cfg: &Config, args: &ServeArgs, dev: &Device) -> anyhow::Result<()> {
    let backend = if args.echo {
        Backend::Echo
    } else {
        let (generator, options) = model_backend(cfg, args.ckpt.as_deref().context("--ckpt is required")?, dev)?;
        Backend::Model { generator, options }
    };
    let bind = args.bind.clone().unwrap_or_else(|| cfg.serve.bind.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (addr, task) = server::spawn(&bind, backend).await?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        task.await??;
        Ok(())
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn bench(cfg: &Config, args: &BenchArgs, dev: &Device) -> anyhow::Result<()> {
    if args.blocks == 0 {
        bail!("--blocks must be at least 1");
    }
    let (gen, mut opts) = model_backend(cfg, &args.ckpt, dev)?;
    opts.seed = args.seed;
    opts.timing_history = args.blocks;
    let clip = match &args.clip {
        Some(id) => find_clip(&cfg.data_dir, id)?,
        None => load_split(&cfg.data_dir, Split::Val)?.into_iter().next().context("empty val split")?,
    };
    let need = 1 + 4 * args.blocks;
    let repeats = (need - 1).div_ceil(clip.control.frames - 1);
    let control = loop_control(&clip.control, repeats)?.slice(0, need)?;
    let out = run_offline_control(gen, &clip.first_frame, &control, &opts)?;
    let s = &out.stats;
    let mut ms: Vec<f64> = s.per_block_ms.iter().copied().collect();
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    println!("{:<24} {:>10}", "frames", s.frames_emitted);
    println!("{:<24} {:>10}", "blocks", s.blocks);
    println!("{:<24} {:>10.2}", "open (ms)", s.open_ms);
    println!("{:<24} {:>10.2}", "first block (ms)", s.first_block_latency_ms.unwrap_or(f64::NAN));
    println!("{:<24} {:>10.2}", "block mean (ms)", mean);
    println!("{:<24} {:>10.2}", "block p50 (ms)", percentile(&ms, 0.5));
    println!("{:<24} {:>10.2}", "block p95 (ms)", percentile(&ms, 0.95));
    println!("{:<24} {:>10.2}", "block max (ms)", percentile(&ms, 1.0));
    println!("{:<24} {:>10.2}", "FPS", s.fps());
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_tracing(cli.verbose);
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    let dev = Device::Cpu;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Data(DataCmd::Gen(a)) => {
            let mut spec = cfg.experiment.dataset.clone();
            spec.deformable = a.deformable.unwrap_or(spec.deformable);
            spec.articulated = a.articulated.unwrap_or(spec.articulated);
            spec.creature = a.creature.unwrap_or(spec.creature);
            spec.seed = a.seed.unwrap_or(spec.seed);
            spec.frames = a.frames.unwrap_or(spec.frames);
            spec.height = a.height.unwrap_or(spec.height);
            spec.width = a.width.unwrap_or(spec.width);
            let out = a.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let index = build_dataset(&spec, &out)?;
            let val = index.iter().filter(|e| e.split == Split::Val).count();
            println!("{} clips ({} val) written to {}", index.len(), val, out.display());
        }
        Command::Codec(CodecCmd::Train) => {
            let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
            let tr = targets(&load_split(&cfg.data_dir, Split::Train)?, &dev)?;
            let va = targets(&load_split(&cfg.data_dir, Split::Val)?, &dev)?;
            let (codec, tensors, report) = train_codec(cfg.experiment.codec.clone(), &cfg.experiment.codec_train, &tr, &va, &dev)?;
            let id = save_codec(&store, &codec, &tensors)?;
            let mse = report.val_mse.iter().sum::<f64>() / report.val_mse.len().max(1) as f64;
            println!("codec {id} (codec id {}) val mse {mse:.5}", codec.id());
        }
        Command::Probe(ProbeCmd::Train) => {
            let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
            let clips = load_split(&cfg.data_dir, Split::Train)?;
            let (probe, tensors, report) = train_probe(&cfg.experiment.probe, &clips, &dev)?;
            let id = save_probe(&store, &probe, &tensors)?;
            println!(
                "probe {id} frame acc {:.3} clip acc {:.3}",
                report.frame_accuracy, report.clip_accuracy
            );
        }
        Command::Train(a) => train(&cfg, a, &dev)?,
        Command::Eval(a) => eval(&cfg, a, &dev)?,
        Command::Render(a) => render(&cfg, a, &dev)?,
        Command::Serve(a) => serve(&cfg, a, &dev)?,
        Command::Bench(a) => bench(&cfg, a, &dev)?,
        Command::List { lineage } => {
            let store = CheckpointStore::open(&cfg.checkpoint_dir)?;
            let entries = match lineage {
                Some(id) => store.lineage(&store.resolve(id)?)?,
                None => store.list()?,
            };
            println!("{:<18} {:<14} {:<8} {:>7} parent", "id", "kind", "stage", "step");
            for e in entries {
                println!(
                    "{:<18} {:<14} {:<8} {:>7} {}",
                    e.id,
                    e.kind,
                    e.stage.as_deref().unwrap_or("-"),
                    e.step,
                    e.parent.as_deref().unwrap_or("-")
                );
            }
        }
    }
    Ok(())
}
