#![allow(dead_code)]

use candle_core::{Device, Tensor};
use interplay_core::causal_dit::{CausalDit, DitConfig, DitInput, COND_WEIGHT};
use interplay_core::nn::{self, NamedTensors};
use interplay_core::rng::SeededRng;

pub fn cpu() -> Device {
    Device::Cpu
}

/// Random weights with the conditioning projection drawn too, so that
/// conditioning actually reaches the output.
pub fn random_weights(cfg: &DitConfig, seed: u64) -> NamedTensors {
    let (_, map) = CausalDit::trainable(cfg.clone(), None, seed, &cpu()).unwrap();
    let mut t = nn::snapshot(&map).unwrap();
    if let Some(w) = t.get(COND_WEIGHT) {
        let mut rng = SeededRng::new(seed ^ 0xc0);
        let fresh = (rng.normal(w.shape(), &cpu()).unwrap() * 0.2).unwrap();
        t.insert(COND_WEIGHT.to_string(), fresh);
    }
    t
}

pub fn random_dit(cfg: &DitConfig, seed: u64) -> CausalDit {
    CausalDit::from_tensors(cfg.clone(), &random_weights(cfg, seed), &cpu()).unwrap()
}

pub fn random_input(cfg: &DitConfig, b: usize, t: usize, rng: &mut SeededRng) -> DitInput {
    let (c, h, w) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width);
    let sig: Vec<f32> = (0..b * t).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    DitInput {
        noisy: rng.normal((b, t, c, h, w), &cpu()).unwrap(),
        cond: cfg.conditioned.then(|| rng.normal((b, t, 2 * c, h, w), &cpu()).unwrap()),
        sigma: Tensor::from_vec(sig, (b, t), &cpu()).unwrap(),
    }
}

pub fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && values(a).iter().zip(values(b)).all(|(x, y)| x.to_bits() == y.to_bits())
}
