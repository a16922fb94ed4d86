//! Short training runs: codec bound on unseen clips, and the first two
//! stages improving on their starting points.

mod common;

use candle_core::Tensor;
use common::*;
use interplay_core::causal_dit::DitConfig;
use interplay_core::latent_codec::{recon_mse, train_codec, CodecConfig, CodecKind, CodecTrainConfig};
use interplay_core::refine_trainer::{train_stage1_teacher, train_stage2_causal, LatentClip, MetricsLog, StageConfig};
use interplay_core::rng::SeededRng;
use interplay_core::sprite_world::{generate_clip, SpriteClass};

fn pixels(seed: u64) -> Tensor {
    let class = [SpriteClass::Deformable, SpriteClass::Articulated, SpriteClass::Creature][seed as usize % 3];
    generate_clip(class, seed, 9, 32, 32).unwrap().target.to_tensor(&cpu()).unwrap()
}

#[test]
fn codec_meets_its_bound_on_unseen_clips() {
    let train: Vec<Tensor> = (0..12).map(pixels).collect();
    let val: Vec<Tensor> = (100..104).map(pixels).collect();
    let tc = CodecTrainConfig {
        steps: 150,
        lr: 2e-3,
        window_blocks: 1,
        log_every: 50,
        batch_size: 1,
        ..Default::default()
    };
    let (codec, _, report) = train_codec(CodecConfig::small(CodecKind::Tiny), &tc, &train, &val, &cpu()).unwrap();
    assert_eq!(codec.meta().recon_bound, Some(report.recon_bound));
    let first = report.losses.first().unwrap().1;
    let last = report.losses.last().unwrap().1;
    assert!(last < first, "{first} -> {last}");
    for seed in 200..204 {
        let mse = recon_mse(&codec, &pixels(seed)).unwrap();
        assert!(mse < report.recon_bound, "clip {seed}: {mse} vs bound {}", report.recon_bound);
    }
}

/// Latent clips whose frames drift smoothly from the first along the control.
fn latent_clips(cfg: &DitConfig, n: usize, rng: &mut SeededRng) -> Vec<LatentClip> {
    let (c, h, w) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width);
    (0..n)
        .map(|i| {
            let first = rng.normal((c, h, w), &cpu()).unwrap();
            let step = (rng.normal((c, h, w), &cpu()).unwrap() * 0.3).unwrap();
            let frames: Vec<Tensor> = (0..5).map(|t| (&first + (&step * t as f64).unwrap()).unwrap()).collect();
            let control: Vec<Tensor> = (0..5).map(|t| (&step * t as f64).unwrap()).collect();
            LatentClip {
                id: format!("toy{i}"),
                class: SpriteClass::Deformable,
                first,
                target: Tensor::stack(&frames, 0).unwrap(),
                control: Tensor::stack(&control, 0).unwrap(),
            }
        })
        .collect()
}

#[test]
fn first_two_stages_improve_on_their_starting_points() {
    let cfg = DitConfig::tiny(2);
    let mut rng = SeededRng::new(1);
    let train = latent_clips(&cfg, 16, &mut rng);
    let val = latent_clips(&cfg, 4, &mut rng);
    let stage = |steps, pretrain| StageConfig {
        steps,
        pretrain_steps: pretrain,
        batch_size: 4,
        lr: 2e-3,
        val_every: 50,
        seed: 5,
        ..Default::default()
    };
    let mut log = MetricsLog::default();
    let teacher = train_stage1_teacher(&train, &val, &cfg, &stage(150, 50), &cpu(), &mut log).unwrap();
    assert!(teacher.final_val < teacher.initial_val, "teacher {} -> {}", teacher.initial_val, teacher.final_val);
    let causal = train_stage2_causal(&teacher.config, &teacher.tensors, &train, &val, &stage(100, 0), &cpu(), &mut log).unwrap();
    assert!(causal.final_val < causal.initial_val, "causal {} -> {}", causal.initial_val, causal.final_val);
    assert!(!causal.val_curve.is_empty());
}
