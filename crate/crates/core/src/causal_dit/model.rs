use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::cache::KvCache;
use super::rope::Rope;
use super::{attend, incremental_mask};
use crate::nn::{self, NamedTensors};
use crate::{Error, Result};

/// Name of the zero-initialized conditioning projection.
pub const COND_WEIGHT: &str = "cond_zero_init.weight";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Whether the conditioning channels are wired in.
    pub conditioned: bool,
    pub freq_dim: usize,
}

impl DitConfig {
    pub fn desk() -> Self {
        Self {
            latent_channels: 8,
            latent_height: 8,
            latent_width: 8,
            patch: 2,
            width: 256,
            layers: 8,
            heads: 4,
            conditioned: true,
            freq_dim: 64,
        }
    }

    pub fn tiny(layers: usize) -> Self {
        Self {
            latent_channels: 4,
            latent_height: 4,
            latent_width: 4,
            patch: 2,
            width: 32,
            layers,
            heads: 2,
            conditioned: true,
            freq_dim: 16,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height / self.patch, self.latent_width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn mid_layer(&self) -> usize {
        self.layers / 2
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.latent_height % self.patch == 0
            && self.latent_width % self.patch == 0
            && self.heads > 0
            && self.width % self.heads == 0
            && self.layers > 0
            && self.freq_dim % 2 == 0;
        if !ok {
            return Err(Error::Config(format!("inconsistent transformer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

/// Batched transformer input.
#[derive(Debug, Clone)]
pub struct DitInput {
    /// `(B, T, C, h, w)` noisy latents.
    pub noisy: Tensor,
    /// `(B, T, 2C, h, w)`: first-frame latent broadcast, then control latents.
    pub cond: Option<Tensor>,
    /// `(B, T)` per-frame noise level.
    pub sigma: Tensor,
}

impl DitInput {
    pub fn frames(&self) -> usize {
        self.noisy.dims().get(1).copied().unwrap_or(0)
    }

    pub fn narrow_frames(&self, start: usize, len: usize) -> Result<DitInput> {
        Ok(DitInput {
            noisy: self.noisy.narrow(1, start, len)?,
            cond: self.cond.as_ref().map(|c| c.narrow(1, start, len)).transpose()?,
            sigma: self.sigma.narrow(1, start, len)?,
        })
    }
}

/// Channel-concatenates the first-frame latent `(B, C, h, w)`, broadcast
/// over time, with control latents `(B, T, C, h, w)`.
pub fn build_condition(first: &Tensor, control: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = control.dims5()?;
    let first = first.unsqueeze(1)?.broadcast_as((b, t, c, h, w))?;
    Ok(Tensor::cat(&[&first, control], 2)?)
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

/// `x * (1 + scale) + shift` with per-frame `(B, T, D)` modulation on
/// tokens `(B, T*n, D)`.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor, n: usize) -> Result<Tensor> {
    let (b, len, d) = x.dims3()?;
    let t = len / n;
    let x = x.reshape((b, t, n, d))?;
    let y = x
        .broadcast_mul(&(scale.unsqueeze(2)? + 1.0)?)?
        .broadcast_add(&shift.unsqueeze(2)?)?;
    Ok(y.reshape((b, len, d))?)
}

fn gate(x: &Tensor, g: &Tensor, n: usize) -> Result<Tensor> {
    let (b, len, d) = x.dims3()?;
    let t = len / n;
    Ok(x.reshape((b, t, n, d))?.broadcast_mul(&g.unsqueeze(2)?)?.reshape((b, len, d))?)
}

fn timestep_features(sigma: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f32> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() as f32)
        .collect();
    let freqs = Tensor::from_vec(freqs, half, sigma.device())?;
    let args = (sigma.unsqueeze(D::Minus1)? * 1000.0)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], D::Minus1)?)
}

struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

enum CacheUse<'a> {
    None,
    Read(&'a KvCache),
    Write(&'a mut KvCache),
}

impl CacheUse<'_> {
    fn get(&self) -> Option<&KvCache> {
        match self {
            CacheUse::None => None,
            CacheUse::Read(c) => Some(c),
            CacheUse::Write(c) => Some(c),
        }
    }
}

pub struct CausalDit {
    cfg: DitConfig,
    embed: Linear,
    cond_embed: Option<Linear>,
    t1: Linear,
    t2: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    final_proj: Linear,
    rope: Rope,
}

pub struct ForwardOutput {
    pub velocity: Tensor,
    /// Token features `(B, T*n, D)` after the first `layers/2` blocks.
    pub mid: Tensor,
}

impl CausalDit {
    pub fn new(cfg: DitConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let td = cfg.token_dim();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let b = vb.pp(format!("blocks.{i}"));
                Ok(Block {
                    ada: linear(d, 6 * d, b.pp("ada"))?,
                    qkv: linear(d, 3 * d, b.pp("qkv"))?,
                    proj: linear(d, d, b.pp("proj"))?,
                    fc1: linear(d, 4 * d, b.pp("fc1"))?,
                    fc2: linear(4 * d, d, b.pp("fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: linear(td, d, vb.pp("embed"))?,
            cond_embed: if cfg.conditioned {
                Some(linear_no_bias(2 * td, d, vb.pp("cond_zero_init"))?)
            } else {
                None
            },
            t1: linear(cfg.freq_dim, d, vb.pp("t_embed.0"))?,
            t2: linear(d, d, vb.pp("t_embed.1"))?,
            blocks,
            final_ada: linear(d, 2 * d, vb.pp("final_ada"))?,
            final_proj: linear(d, td, vb.pp("final_proj"))?,
            rope: Rope::new(cfg.head_dim(), cfg.grid())?,
            cfg,
        })
    }

    /// Seeded model whose parameters live in the returned map. When
    /// `tensors` is given they replace the seeded values.
    pub fn trainable(cfg: DitConfig, tensors: Option<&NamedTensors>, seed: u64, device: &Device) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let model = Self::new(cfg, VarBuilder::from_varmap(&varmap, DType::F32, device))?;
        nn::seeded_init(&varmap, seed)?;
        if let Some(t) = tensors {
            nn::load_into(&varmap, t)?;
        }
        Ok((model, varmap))
    }

    pub fn from_tensors(cfg: DitConfig, tensors: &NamedTensors, device: &Device) -> Result<Self> {
        Self::new(cfg, nn::frozen_builder(tensors, device))
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let p = self.cfg.patch;
        let (gh, gw) = (h / p, w / p);
        let x = x
            .reshape(&[b, t, c, gh, p, gw, p][..])?
            .permute(&[0, 1, 3, 5, 2, 4, 6][..])?
            .contiguous()?;
        Ok(x.reshape((b, t * gh * gw, c * p * p))?)
    }

    fn unpatchify(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let b = x.dim(0)?;
        let p = self.cfg.patch;
        let (gh, gw) = self.cfg.grid();
        let c = self.cfg.latent_channels;
        let x = x
            .reshape(&[b, t, gh, gw, c, p, p][..])?
            .permute(&[0, 1, 4, 2, 5, 3, 6][..])?
            .contiguous()?;
        Ok(x.reshape((b, t, c, gh * p, gw * p))?)
    }

    fn check_input(&self, input: &DitInput) -> Result<(usize, usize)> {
        let (b, t, c, h, w) = input.noisy.dims5().map_err(|_| {
            Error::RejectedInput(format!("noisy latents must be (B, T, C, h, w), got {:?}", input.noisy.dims()))
        })?;
        let cfg = &self.cfg;
        if c != cfg.latent_channels || h != cfg.latent_height || w != cfg.latent_width || t == 0 {
            return Err(Error::RejectedInput(format!(
                "noisy latents {:?} do not match the model",
                input.noisy.dims()
            )));
        }
        if input.sigma.dims() != [b, t] {
            return Err(Error::RejectedInput(format!(
                "sigma {:?} should be ({b}, {t})",
                input.sigma.dims()
            )));
        }
        match (&input.cond, cfg.conditioned) {
            (Some(cond), true) if cond.dims() != [b, t, 2 * c, h, w] => Err(Error::RejectedInput(format!(
                "conditioning {:?} should be ({b}, {t}, {}, {h}, {w})",
                cond.dims(),
                2 * c
            ))),
            (None, true) => Err(Error::RejectedInput("conditioned model needs conditioning latents".into())),
            (Some(_), false) => Err(Error::RejectedInput("model has no conditioning channels".into())),
            _ => Ok((b, t)),
        }
    }

    fn run(&self, input: &DitInput, mode: AttentionMode, mut cache: CacheUse) -> Result<ForwardOutput> {
        let (b, t) = self.check_input(input)?;
        let cfg = &self.cfg;
        let n = cfg.tokens_per_frame();
        let (heads, hd, d) = (cfg.heads, cfg.head_dim(), cfg.width);
        if let Some(c) = cache.get() {
            if c.num_layers() != cfg.layers {
                return Err(Error::Config(format!(
                    "cache has {} layers, model has {}",
                    c.num_layers(),
                    cfg.layers
                )));
            }
            if mode != AttentionMode::Causal {
                return Err(Error::Config("cached forward requires causal attention".into()));
            }
        }
        let start = cache.get().map_or(0, |c| c.frames_cached());
        let frames: Vec<usize> = (start..start + t).collect();
        let dev = input.noisy.device();

        let mut x = self.embed.forward(&self.patchify(&input.noisy)?)?;
        if let (Some(ce), Some(cond)) = (&self.cond_embed, &input.cond) {
            x = (x + ce.forward(&self.patchify(cond)?)?)?;
        }
        let temb = timestep_features(&input.sigma, cfg.freq_dim)?;
        let c = self.t2.forward(&self.t1.forward(&temb)?.silu()?)?;
        let c_act = c.silu()?;
        let (cos, sin) = self.rope.tables(&frames, dev)?;

        let mut mid = None;
        for (l, blk) in self.blocks.iter().enumerate() {
            if l == cfg.mid_layer() {
                mid = Some(x.clone());
            }
            let m = blk.ada.forward(&c_act)?.chunk(6, D::Minus1)?;
            let h = modulate(&layer_norm(&x)?, &m[0], &m[1], n)?;
            let qkv = blk
                .qkv
                .forward(&h)?
                .reshape((b, t * n, 3, heads, hd))?
                .permute((2, 0, 3, 1, 4))?;
            let q = self.rope.apply(&qkv.get(0)?, &cos, &sin)?;
            let k = self.rope.apply(&qkv.get(1)?, &cos, &sin)?;
            let v = qkv.get(2)?.contiguous()?;
            let cached = match cache.get() {
                Some(c) => c.kv(l)?,
                None => None,
            };
            let cached_tokens = cached.as_ref().map_or(0, |(kc, _)| kc.dim(2).unwrap_or(0));
            let (k_all, v_all) = match &cached {
                Some((kc, vc)) => (Tensor::cat(&[kc, &k], 2)?, Tensor::cat(&[vc, &v], 2)?),
                None => (k.clone(), v.clone()),
            };
            let mask = match mode {
                AttentionMode::Causal => incremental_mask(cached_tokens, t, n, dev)?,
                AttentionMode::Bidirectional => None,
            };
            let a = attend(&q, &k_all, &v_all, mask.as_ref())?
                .permute((0, 2, 1, 3))?
                .reshape((b, t * n, d))?;
            x = (x + gate(&blk.proj.forward(&a)?, &m[2], n)?)?;
            let h = modulate(&layer_norm(&x)?, &m[3], &m[4], n)?;
            let f = blk.fc2.forward(&blk.fc1.forward(&h)?.gelu()?)?;
            x = (x + gate(&f, &m[5], n)?)?;
            if let CacheUse::Write(cache) = &mut cache {
                for (i, &frame) in frames.iter().enumerate() {
                    cache.append(l, frame, &k.narrow(2, i * n, n)?, &v.narrow(2, i * n, n)?)?;
                }
            }
        }
        let mid = mid.unwrap_or_else(|| x.clone());
        let fm = self.final_ada.forward(&c_act)?.chunk(2, D::Minus1)?;
        let out = self.final_proj.forward(&modulate(&layer_norm(&x)?, &fm[0], &fm[1], n)?)?;
        Ok(ForwardOutput {
            velocity: self.unpatchify(&out, t)?,
            mid,
        })
    }

    /// Velocity prediction `(B, T, C, h, w)` over whole sequences.
    pub fn forward(&self, input: &DitInput, mode: AttentionMode) -> Result<Tensor> {
        Ok(self.run(input, mode, CacheUse::None)?.velocity)
    }

    pub fn forward_with_features(&self, input: &DitInput, mode: AttentionMode) -> Result<ForwardOutput> {
        self.run(input, mode, CacheUse::None)
    }

    /// Causal forward of frames following the cached ones. With `append`
    /// the new frames' keys and values are committed to the cache.
    pub fn forward_cached(&self, input: &DitInput, cache: &mut KvCache, append: bool) -> Result<Tensor> {
        let use_ = if append {
            CacheUse::Write(cache)
        } else {
            CacheUse::Read(cache)
        };
        Ok(self.run(input, AttentionMode::Causal, use_)?.velocity)
    }

    /// Read-only cached forward.
    pub fn forward_with_cache(&self, input: &DitInput, cache: &KvCache) -> Result<Tensor> {
        Ok(self.run(input, AttentionMode::Causal, CacheUse::Read(cache))?.velocity)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.layers)
    }
}

/// Adds a zero-initialized projection for `2 * C` conditioning channels to
/// the weights of an unconditioned model.
pub fn extend_input_channels(cfg: &DitConfig, tensors: &NamedTensors) -> Result<(DitConfig, NamedTensors)> {
    if cfg.conditioned {
        return Err(Error::Config("model already has conditioning channels".into()));
    }
    let base = tensors
        .get("embed.weight")
        .ok_or_else(|| Error::Config("weights lack embed.weight".into()))?;
    let mut out = tensors.clone();
    out.insert(
        COND_WEIGHT.to_string(),
        Tensor::zeros((cfg.width, 2 * cfg.token_dim()), DType::F32, base.device())?,
    );
    let mut cfg = cfg.clone();
    cfg.conditioned = true;
    Ok((cfg, out))
}
