mod common;

use candle_core::{DType, Tensor};
use candle_nn::{VarBuilder, VarMap};
use common::*;
use interplay_core::eval_metrics::{
    contact_response_probe, evaluate_videos, frechet_distance, motion_smoothness, FeatureStats, Probe, ProbeConfig, FEATURE_DIM,
};
use interplay_core::nn::{max_abs_diff, seeded_init};
use interplay_core::rng::SeededRng;
use interplay_core::sprite_world::{generate_clip, generate_dataset, DatasetSpec, SpriteClass};
use nalgebra::{DMatrix, DVector};

fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
    let d = mean.len();
    FeatureStats {
        mean: DVector::from_row_slice(mean),
        cov: DMatrix::from_row_slice(d, d, cov),
        count: 100,
    }
}

#[test]
fn frechet_distance_closed_forms() {
    let a = stats(&[0.0], &[1.0]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    assert!((frechet_distance(&a, &stats(&[1.0], &[1.0])).unwrap() - 1.0).abs() < 1e-6);
    assert!((frechet_distance(&a, &stats(&[0.0], &[4.0])).unwrap() - 1.0).abs() < 1e-6);
    // commuting covariances: sum of 1-D terms
    let d = frechet_distance(&stats(&[0.0, 2.0], &[1.0, 0.0, 0.0, 9.0]), &stats(&[1.0, 0.0], &[4.0, 0.0, 0.0, 1.0])).unwrap();
    assert!((d - (1.0 + 1.0 + 4.0 + 4.0)).abs() < 1e-6, "{d}");
}

#[test]
fn frechet_distance_is_symmetric_and_zero_on_itself() {
    let mut rng = SeededRng::new(1);
    let rows = |rng: &mut SeededRng, shift: f64| -> Vec<Vec<f64>> {
        (0..200).map(|_| (0..6).map(|j| rng.standard_normal() as f64 * (1.0 + j as f64 * 0.3) + shift).collect()).collect()
    };
    let a = FeatureStats::from_rows(&rows(&mut rng, 0.0)).unwrap();
    let b = FeatureStats::from_rows(&rows(&mut rng, 0.5)).unwrap();
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    assert!(ab > 0.5 && (ab - ba).abs() < 1e-6 * ab.max(1.0), "{ab} {ba}");
    assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
}

fn video(t: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> Tensor {
    let (h, w) = (32, 32);
    let mut v = Vec::with_capacity(t * 3 * h * w);
    for ti in 0..t {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(ti, c, y, x));
                }
            }
        }
    }
    Tensor::from_vec(v, (t, 3, h, w), &cpu()).unwrap()
}

#[test]
fn motion_smoothness_references() {
    let stat = video(9, |_, c, y, x| ((x + y + c) % 7) as f32 / 7.0 - 0.5);
    assert_eq!(motion_smoothness(&stat).unwrap(), 1.0);

    let tau = std::f32::consts::TAU;
    let moving = video(17, |t, c, y, x| 0.5 * (tau * (x as f32 - t as f32) / 32.0 + y as f32 * 0.1 + c as f32).sin());
    assert!(motion_smoothness(&moving).unwrap() >= 0.99);

    let rng = std::cell::RefCell::new(SeededRng::new(2));
    let noise = video(17, |_, _, _, _| rng.borrow_mut().uniform(-1.0, 1.0) as f32);
    assert!(motion_smoothness(&noise).unwrap() <= 0.2);

    let brighter = (&moving * 0.8).unwrap().affine(1.0, 0.1).unwrap();
    let scaled = (&moving * 0.8).unwrap();
    assert!((motion_smoothness(&brighter).unwrap() - motion_smoothness(&scaled).unwrap()).abs() < 1e-9);
}

#[test]
fn contact_response_on_simulator_output() {
    let mut ratios = Vec::new();
    for seed in 0..12 {
        let clip = generate_clip(SpriteClass::Deformable, seed, 33, 64, 64).unwrap();
        let target = clip.target.to_tensor(&cpu()).unwrap();
        let Some(r) = contact_response_probe(&target, &clip.meta).unwrap() else {
            continue;
        };
        ratios.push(r.response_ratio);

        let still = target.narrow(0, 0, 1).unwrap().repeat((33, 1, 1, 1)).unwrap();
        let s = contact_response_probe(&still, &clip.meta).unwrap().unwrap();
        assert_eq!((s.pre_contact_motion, s.post_contact_motion, s.response_ratio), (0.0, 0.0, 1.0));

        let control = clip.control.to_tensor(&cpu()).unwrap();
        let c = contact_response_probe(&control, &clip.meta).unwrap().unwrap();
        assert!(c.pre_contact_motion < 1e-3 && c.post_contact_motion < 1e-3, "{c:?}");
    }
    assert!(ratios.len() >= 6, "{} clips with contact", ratios.len());
    assert!(ratios.iter().all(|r| *r > 5.0), "{ratios:?}");
}

fn random_probe(seed: u64) -> Probe {
    let map = VarMap::new();
    let probe = Probe::new(ProbeConfig::default(), VarBuilder::from_varmap(&map, DType::F32, &cpu())).unwrap();
    seeded_init(&map, seed).unwrap();
    probe
}

#[test]
fn probe_features_are_fixed_size_and_see_time() {
    let probe = random_probe(3);
    let clip = generate_clip(SpriteClass::Creature, 5, 33, 32, 32).unwrap().target.to_tensor(&cpu()).unwrap();
    for t in [9, 33] {
        assert_eq!(probe.embed_clip(&clip.narrow(0, 0, t).unwrap()).unwrap().dims(), &[FEATURE_DIM]);
    }
    assert_eq!(probe.embed_frames(&clip).unwrap().dims(), &[33, FEATURE_DIM]);
    assert!(bit_equal(&probe.embed_clip(&clip).unwrap(), &probe.embed_clip(&clip).unwrap()));
    let mut order: Vec<u32> = (0..33).collect();
    SeededRng::new(5).shuffle(&mut order);
    let shuffled = clip.index_select(&Tensor::new(order.as_slice(), &cpu()).unwrap(), 0).unwrap();
    assert!(max_abs_diff(&probe.embed_clip(&clip).unwrap(), &probe.embed_clip(&shuffled).unwrap()).unwrap() > 1e-4);
}

#[test]
fn ground_truth_against_itself_scores_zero() {
    let spec = DatasetSpec {
        deformable: 4,
        articulated: 4,
        creature: 4,
        frames: 17,
        height: 32,
        width: 32,
        seed: 2,
    };
    let clips: Vec<_> = generate_dataset(&spec).unwrap().into_iter().map(|(_, c)| c).collect();
    let videos: Vec<Tensor> = clips.iter().map(|c| c.target.to_tensor(&cpu()).unwrap()).collect();
    let report = evaluate_videos("gt", &random_probe(4), &clips, &videos).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.overall().class, "overall");
    for row in &report.rows {
        assert!(row.toy_fid.abs() <= 1e-6 && row.toy_fvd.abs() <= 1e-6, "{row:?}");
    }
    // a frame-shuffled split moves the clip metric but not the frame metric much
    let shuffled: Vec<Tensor> = videos
        .iter()
        .map(|v| {
            let mut order: Vec<u32> = (0..17).collect();
            SeededRng::new(1).shuffle(&mut order);
            v.index_select(&Tensor::new(order.as_slice(), &cpu()).unwrap(), 0).unwrap()
        })
        .collect();
    let r = evaluate_videos("shuffled", &random_probe(4), &clips, &shuffled).unwrap();
    let base = report.overall().toy_fvd.abs();
    assert!(r.overall().toy_fvd > 100.0 * base.max(1e-12), "{:?} vs {base}", r.overall());
    assert!(r.overall().toy_fid <= 1e-6, "{:?}", r.overall());
}
