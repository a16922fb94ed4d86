//! Closed forms, Monte-Carlo oracles and finite-difference gradient checks
//! for the diffusion, distribution-matching, critic and adversarial losses.

mod common;

use std::cell::RefCell;

use candle_core::{DType, Shape, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use common::*;
use interplay_core::causal_dit::{AttentionMode, DitConfig, DitInput};
use interplay_core::flow_diffusion::{
    diffusion_loss, noisify, sample_frame, sample_sigmas, velocity_target, LossConfig, NoiseSchedule, StepTrace,
};
use interplay_core::nn::{max_abs_diff, scalar};
use interplay_core::refine_trainer::{
    critic_loss, d_loss, dmd_loss, draw_sigmas, g_loss, gan_losses_from_probs, r1_penalty, softplus,
};
use interplay_core::rng::SeededRng;
use interplay_core::Result;

const LN2: f64 = std::f64::consts::LN_2;

/// Central differences against autograd; relative error in the L2 norm.
fn gradient_error(f: &dyn Fn(&Tensor) -> Tensor, p0: &[f64], dtype: DType, h: f64) -> f64 {
    let dev = cpu();
    let n = p0.len();
    let make = |v: &[f64]| Tensor::from_vec(v.to_vec(), n, &dev).unwrap().to_dtype(dtype).unwrap();
    let var = Var::from_tensor(&make(p0)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let auto: Vec<f64> = grads
        .get(var.as_tensor())
        .expect("no gradient")
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap();
    let eval = |v: &[f64]| f(&make(v)).to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let fd: Vec<f64> = (0..n)
        .map(|i| {
            let (mut a, mut b) = (p0.to_vec(), p0.to_vec());
            a[i] += h;
            b[i] -= h;
            (eval(&a) - eval(&b)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = auto.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(&auto).max(norm(&fd)).max(1e-12)
}

fn shape5(b: usize, t: usize) -> (usize, usize, usize, usize, usize) {
    (b, t, 2, 2, 2)
}

#[test]
fn noisify_derivative_is_the_velocity() {
    let mut rng = SeededRng::new(1);
    let z = rng.normal(shape5(1, 1), &cpu()).unwrap();
    let eps = rng.normal(shape5(1, 1), &cpu()).unwrap();
    let v = velocity_target(&z, &eps).unwrap();
    for s in [0.1, 0.5, 0.9] {
        let h = 1e-2;
        let d = ((noisify(&z, s + h, &eps).unwrap() - noisify(&z, s - h, &eps).unwrap()).unwrap() / (2.0 * h)).unwrap();
        assert!(max_abs_diff(&d, &v).unwrap() < 1e-4);
    }
}

#[test]
fn diffusion_loss_is_zero_for_the_exact_velocity() {
    let mut rng = SeededRng::new(2);
    let z = rng.normal(shape5(3, 4), &cpu()).unwrap();
    let cfg = LossConfig::default();
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        // replay the loss's own draws
        let mut replay = rng.clone();
        sample_sigmas(3, 4, mode, &cfg, &mut replay, &cpu()).unwrap();
        let eps = replay.normal(z.shape(), &cpu()).unwrap();
        let target = velocity_target(&z, &eps).unwrap();
        let oracle = |_: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(target.clone()) };
        let l = diffusion_loss(&oracle, &z, None, mode, &cfg, &mut rng).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
    }
}

#[test]
fn zero_model_loss_matches_latent_size() {
    // z = 0: the loss is E ||eps||^2 = C h w per frame
    let z = Tensor::zeros(shape5(10_000, 2), DType::F32, &cpu()).unwrap();
    let zero = |x: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(x.noisy.zeros_like()?) };
    let l = scalar(&diffusion_loss(&zero, &z, None, AttentionMode::Causal, &LossConfig::default(), &mut SeededRng::new(3)).unwrap()).unwrap();
    assert!((l - 8.0).abs() / 8.0 < 0.05, "{l}");
}

/// Ten parameters: per-channel scale and bias, a σ term, per-channel
/// weights on both conditioning halves and a constant.
fn toy_velocity(p: &Tensor, x: &DitInput) -> Result<Tensor> {
    let (b, t, c, _, _) = x.noisy.dims5()?;
    let chan = |off: usize| p.narrow(0, off, c).and_then(|v| v.reshape((1, 1, c, 1, 1)));
    let mut v = x.noisy.broadcast_mul(&chan(0)?)?.broadcast_add(&chan(2)?)?;
    v = v.broadcast_add(&x.sigma.reshape((b, t, 1, 1, 1))?.broadcast_mul(&p.narrow(0, 4, 1)?.reshape((1, 1, 1, 1, 1))?)?)?;
    if let Some(cond) = &x.cond {
        v = (v + cond.narrow(2, 0, c)?.broadcast_mul(&chan(5)?)?)?;
        v = (v + cond.narrow(2, c, c)?.broadcast_mul(&chan(7)?)?)?;
    }
    Ok(v.broadcast_add(&p.narrow(0, 9, 1)?.reshape((1, 1, 1, 1, 1))?)?)
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(4);
    let z = rng.normal(shape5(2, 3), &cpu()).unwrap();
    let cond = rng.normal((2, 3, 4, 2, 2), &cpu()).unwrap();
    let p0: Vec<f64> = (0..10).map(|_| rng.uniform(-0.5, 0.5)).collect();
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let f = |p: &Tensor| {
            let model = |x: &DitInput, _: AttentionMode| toy_velocity(p, x);
            diffusion_loss(&model, &z, Some(&cond), mode, &LossConfig::default(), &mut SeededRng::new(40)).unwrap()
        };
        let err = gradient_error(&f, &p0, DType::F32, 1e-2);
        assert!(err <= 1e-3, "{mode:?}: {err}");
    }
}

#[test]
fn one_step_inversion_recovers_the_sample() {
    let mut rng = SeededRng::new(5);
    let z_true = rng.normal((1, 1, 2, 2, 2), &cpu()).unwrap();
    let schedule = NoiseSchedule::new(vec![1.0]).unwrap();
    // at σ = 1 the input is pure noise, so ε − z = noisy − z
    let mut oracle = |_: usize, noisy: &Tensor, _: f64| -> Result<Tensor> { Ok((noisy - &z_true)?) };
    let shape = Shape::from(z_true.dims());
    let z = sample_frame(&mut oracle, &schedule, &shape, &cpu(), &mut rng, None).unwrap();
    assert!(max_abs_diff(&z, &z_true).unwrap() <= 1e-6);
}

#[test]
fn every_step_renoises_with_fresh_noise() {
    let model = |_: usize, noisy: &Tensor, _: f64| -> Result<Tensor> { Ok((noisy * 0.3)?) };
    let schedule = NoiseSchedule::default();
    assert_eq!(schedule.sigmas(), &[1.0, 0.75, 0.5, 0.25]);
    let shape = Shape::from((1, 1, 2, 2, 2));
    let run = |seed| {
        let mut trace: Vec<StepTrace> = Vec::new();
        let mut m = model;
        let z = sample_frame(&mut m, &schedule, &shape, &cpu(), &mut SeededRng::new(seed), Some(&mut trace)).unwrap();
        (z, trace)
    };
    let (z, trace) = run(6);
    assert_eq!(trace.len(), 4);
    for i in 1..4 {
        let s = trace[i].sigma;
        assert_eq!(s, schedule.sigmas()[i]);
        for j in 0..i {
            assert!(max_abs_diff(&trace[i].eps, &trace[j].eps).unwrap() > 0.1);
        }
        let expect = noisify(&trace[i - 1].denoised, s, &trace[i].eps).unwrap();
        assert!(bit_equal(&expect, &trace[i].noisy));
    }
    assert!(bit_equal(&z, &trace[3].denoised));
    assert!(bit_equal(&z, &run(6).0));
}

#[test]
fn dmd_vanishes_with_shared_scores() {
    let cfg = DitConfig::tiny(2);
    let model = random_dit(&cfg, 7);
    let mut rng = SeededRng::new(7);
    let x = random_input(&cfg, 2, 3, &mut rng);
    let l = dmd_loss(&model, &model, &x.noisy, x.cond.as_ref(), &[false, true, true], (0.02, 1.0), &mut rng).unwrap();
    assert_eq!(scalar(&l).unwrap(), 0.0);
}

#[test]
fn dmd_of_constant_scores_is_half_the_squared_gap() {
    let z = SeededRng::new(8).normal(shape5(2, 4), &cpu()).unwrap();
    let (a, b) = (0.3f32, -1.1f32);
    let real = |x: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(x.noisy.ones_like()?.affine(a as f64, 0.0)?) };
    let fake = |x: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(x.noisy.ones_like()?.affine(b as f64, 0.0)?) };
    let l = scalar(&dmd_loss(&real, &fake, &z, None, &[false, false, true, true], (0.02, 1.0), &mut SeededRng::new(1)).unwrap()).unwrap();
    let want = 0.5 * ((a - b) as f64).powi(2);
    assert!((l - want).abs() < 1e-6, "{l} vs {want}");
}

#[test]
fn dmd_gradient_matches_finite_differences_of_its_surrogate() {
    let mut rng = SeededRng::new(9);
    let z0 = rng.normal(shape5(2, 3), &cpu()).unwrap();
    let seen: RefCell<Option<DitInput>> = RefCell::new(None);
    let real_of = |x: &DitInput| -> Result<Tensor> { Ok((x.noisy.tanh()? * 0.8)?) };
    let fake_of = |x: &DitInput| -> Result<Tensor> { Ok(((&x.noisy * 0.5)?.sin()? + x.sigma.reshape((2, 3, 1, 1, 1))?.broadcast_as(x.noisy.shape())?)?) };
    let real = |x: &DitInput, _: AttentionMode| {
        *seen.borrow_mut() = Some(x.clone());
        real_of(x)
    };
    let fake = |x: &DitInput, _: AttentionMode| fake_of(x);
    let mask = [false, true, true];

    let var = Var::from_tensor(&z0).unwrap();
    let l = dmd_loss(&real, &fake, var.as_tensor(), None, &mask, (0.02, 1.0), &mut SeededRng::new(90)).unwrap();
    let g = l.backward().unwrap().get(var.as_tensor()).unwrap().clone();
    assert_eq!(values(&g.narrow(1, 0, 1).unwrap()).iter().map(|v| v.abs()).sum::<f32>(), 0.0);

    // the target is frozen at z0 + (f_fake - f_real) on the shared noised input
    let input = seen.borrow().clone().unwrap();
    let delta = (fake_of(&input).unwrap() - real_of(&input).unwrap()).unwrap().narrow(1, 1, 2).unwrap();
    let target = (z0.narrow(1, 1, 2).unwrap() + &delta).unwrap();
    let surrogate = |p: &Tensor| {
        let z = p.reshape(z0.shape()).unwrap().narrow(1, 1, 2).unwrap();
        ((z - &target).unwrap().sqr().unwrap().mean_all().unwrap() * 0.5).unwrap()
    };
    let p0: Vec<f64> = values(&z0).iter().map(|v| *v as f64).collect();
    // autograd of the surrogate is checked against finite differences, then
    // against the loss's own gradient
    assert!(gradient_error(&surrogate, &p0, DType::F32, 1e-2) <= 1e-3);
    let n = delta.elem_count() as f64;
    let closed = (delta.neg().unwrap() / n).unwrap();
    assert!(max_abs_diff(&g.narrow(1, 1, 2).unwrap(), &closed).unwrap() <= 1e-7);
}

#[test]
fn critic_loss_is_zero_for_the_exact_velocity_and_spares_the_generator() {
    let mut rng = SeededRng::new(10);
    let base = rng.normal(shape5(2, 4), &cpu()).unwrap();
    let g_param = Var::from_tensor(&Tensor::new(&[1.5f32], &cpu()).unwrap()).unwrap();
    let z_hat = base.broadcast_mul(g_param.as_tensor()).unwrap();

    let dummy = |x: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(x.noisy.zeros_like()?) };
    let (_, draw) = critic_loss(&dummy, &z_hat, None, (0.02, 1.0), &mut rng.clone()).unwrap();
    let target = velocity_target(&z_hat.detach(), &draw.eps).unwrap();
    let oracle = |_: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(target.clone()) };
    let (l, _) = critic_loss(&oracle, &z_hat, None, (0.02, 1.0), &mut rng.clone()).unwrap();
    assert_eq!(scalar(&l).unwrap(), 0.0);

    let q = Var::from_tensor(&Tensor::new(&[0.2f32], &cpu()).unwrap()).unwrap();
    let fake = |x: &DitInput, _: AttentionMode| -> Result<Tensor> { Ok(x.noisy.broadcast_mul(q.as_tensor())?) };
    let (l, _) = critic_loss(&fake, &z_hat, None, (0.02, 1.0), &mut rng).unwrap();
    let grads = l.backward().unwrap();
    assert!(grads.get(q.as_tensor()).is_some());
    assert!(grads.get(g_param.as_tensor()).is_none());
}

#[test]
fn critic_training_on_a_frozen_generator_reduces_its_loss() {
    let mut rng = SeededRng::new(11);
    let z_hat = (rng.normal(shape5(4, 4), &cpu()).unwrap() * 0.5).unwrap();
    let p = Var::from_tensor(&Tensor::zeros(10, DType::F32, &cpu()).unwrap()).unwrap();
    let mut opt = AdamW::new(vec![p.clone()], ParamsAdamW { lr: 2e-2, weight_decay: 0.0, ..Default::default() }).unwrap();
    let mut curve = Vec::new();
    for _ in 0..300 {
        let fake = |x: &DitInput, _: AttentionMode| toy_velocity(p.as_tensor(), x);
        let (l, _) = critic_loss(&fake, &z_hat, None, (0.02, 1.0), &mut rng).unwrap();
        curve.push(scalar(&l).unwrap());
        opt.backward_step(&l).unwrap();
    }
    let head: f64 = curve[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = curve[270..].iter().sum::<f64>() / 30.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn adversarial_losses_at_an_undecided_discriminator() {
    let zeros = Tensor::zeros(16, DType::F64, &cpu()).unwrap();
    assert!((scalar(&d_loss(&zeros, &zeros).unwrap()).unwrap() - 2.0 * LN2).abs() < 1e-6);
    assert!((scalar(&g_loss(&zeros).unwrap()).unwrap() - LN2).abs() < 1e-6);
    let v = gan_losses_from_probs(&[0.5; 8], &[0.5; 8]).unwrap();
    assert!((v.d - 2.0 * LN2).abs() < 1e-6 && (v.g - LN2).abs() < 1e-6);
    // logits and probabilities agree away from 0.5 too
    let (lr, lf) = (Tensor::new(&[1.2f64, -0.4], &cpu()).unwrap(), Tensor::new(&[0.3f64, -2.0], &cpu()).unwrap());
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let v = gan_losses_from_probs(&[sig(1.2), sig(-0.4)], &[sig(0.3), sig(-2.0)]).unwrap();
    assert!((scalar(&d_loss(&lr, &lf).unwrap()).unwrap() - v.d).abs() < 1e-6);
    assert!((scalar(&g_loss(&lf).unwrap()).unwrap() - v.g).abs() < 1e-6);
    assert!(scalar(&softplus(&Tensor::new(&[-800f64], &cpu()).unwrap()).unwrap().sum_all().unwrap()).unwrap() >= 0.0);
}

fn toy_disc(p: &Tensor, x: &Tensor) -> Result<Tensor> {
    // (B, 4) -> (B,): tanh layer of width 2 then a linear read-out, 13 parameters
    let w1 = p.narrow(0, 0, 8)?.reshape((4, 2))?;
    let b1 = p.narrow(0, 8, 2)?;
    let w2 = p.narrow(0, 10, 2)?.reshape((2, 1))?;
    let h = x.to_dtype(p.dtype())?.matmul(&w1)?.broadcast_add(&b1)?.tanh()?;
    Ok(h.matmul(&w2)?.broadcast_add(&p.narrow(0, 12, 1)?)?.squeeze(1)?)
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(12);
    let real = rng.normal((6, 4), &cpu()).unwrap();
    let fake = (rng.normal((6, 4), &cpu()).unwrap() + 0.5).unwrap();
    let p0: Vec<f64> = (0..13).map(|_| rng.uniform(-0.8, 0.8)).collect();
    let fd = |p: &Tensor| d_loss(&toy_disc(p, &real).unwrap(), &toy_disc(p, &fake).unwrap()).unwrap();
    let fg = |p: &Tensor| g_loss(&toy_disc(p, &fake).unwrap()).unwrap();
    let fr = |p: &Tensor| {
        let d = |x: &Tensor| toy_disc(p, x);
        r1_penalty(&d, &real, 0.3, &mut SeededRng::new(5)).unwrap()
    };
    for (name, f) in [("d", &fd as &dyn Fn(&Tensor) -> Tensor), ("g", &fg), ("r1", &fr)] {
        let err = gradient_error(f, &p0, DType::F64, 1e-5);
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn r1_matches_its_analytic_value_for_an_affine_discriminator() {
    let mut rng = SeededRng::new(13);
    let x = rng.normal((10_000, 10), &cpu()).unwrap();
    let w = Tensor::from_vec((0..10).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f64>>(), (10, 1), &cpu()).unwrap();
    let d = |x: &Tensor| -> Result<Tensor> { Ok((x.to_dtype(DType::F64)?.matmul(&w)? + 0.7)?) };
    assert_eq!(scalar(&r1_penalty(&d, &x, 0.0, &mut rng).unwrap()).unwrap(), 0.0);
    let sigma = 0.1;
    let mc = scalar(&r1_penalty(&d, &x, sigma, &mut rng).unwrap()).unwrap();
    let analytic = sigma * sigma * scalar(&w.sqr().unwrap().sum_all().unwrap()).unwrap();
    assert!((mc - analytic).abs() / analytic < 0.05, "{mc} vs {analytic}");
}

#[test]
fn dmd_sigmas_keep_the_bootstrap_clean() {
    let s = draw_sigmas(5, 4, (0.02, 1.0), true, &mut SeededRng::new(14), &cpu()).unwrap();
    let v: Vec<Vec<f32>> = s.to_vec2().unwrap();
    for row in v {
        assert_eq!(row[0], 0.0);
        assert!(row[1..].iter().all(|x| *x == row[1] && (0.02..=1.0).contains(x)));
    }
}
