//! Diffusion transformer over latent-frame tokens with bidirectional or
//! block-causal attention, channel-concatenated conditioning and an
//! append-only key/value cache.

mod cache;
mod model;
mod rope;

use candle_core::{DType, Device, Tensor, D};

pub use cache::KvCache;
pub use model::{build_condition, extend_input_channels, AttentionMode, CausalDit, DitConfig, DitInput, ForwardOutput, COND_WEIGHT};
pub use rope::Rope;

use crate::{Error, Result};

/// Additive mask over `frames * tokens` positions: 0 where the key frame is
/// not later than the query frame, `-inf` elsewhere.
#[derive(Debug, Clone)]
pub struct BlockCausalMask {
    pub frames: usize,
    pub tokens: usize,
    entries: Vec<f32>,
}

impl BlockCausalMask {
    pub fn size(&self) -> usize {
        self.frames * self.tokens
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn get(&self, q: usize, k: usize) -> f32 {
        self.entries[q * self.size() + k]
    }

    pub fn blocked(&self) -> usize {
        self.entries.iter().filter(|v| v.is_infinite()).count()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.entries, (self.size(), self.size()), device)?)
    }
}

pub fn build_block_causal_mask(frames: usize, tokens: usize) -> BlockCausalMask {
    let n = frames * tokens;
    let mut entries = vec![0f32; n * n];
    for q in 0..n {
        for k in 0..n {
            if k / tokens > q / tokens {
                entries[q * n + k] = f32::NEG_INFINITY;
            }
        }
    }
    BlockCausalMask {
        frames,
        tokens,
        entries,
    }
}

/// Mask for `new` query frames appended after `cached` key frames: every
/// cached key is visible, new keys follow the block-causal rule.
pub(crate) fn incremental_mask(cached_tokens: usize, new_frames: usize, tokens: usize, device: &Device) -> Result<Option<Tensor>> {
    if new_frames <= 1 {
        return Ok(None);
    }
    let nq = new_frames * tokens;
    let nk = cached_tokens + nq;
    let mut m = vec![0f32; nq * nk];
    for q in 0..nq {
        for k in 0..nq {
            if k / tokens > q / tokens {
                m[q * nk + cached_tokens + k] = f32::NEG_INFINITY;
            }
        }
    }
    Ok(Some(Tensor::from_vec(m, (nq, nk), device)?))
}

/// `softmax(q kᵀ / sqrt(d) + mask) v` on `(..., N, d)` tensors without checks.
pub(crate) fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let w = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(w.matmul(&v.contiguous()?)?)
}

/// Scaled dot-product attention; rejects masks that block a whole row.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (dq, dk, dv) = (q.dim(D::Minus1)?, k.dim(D::Minus1)?, v.dim(D::Minus1)?);
    if dq != dk {
        return Err(Error::Contract(format!("query dim {dq} vs key dim {dk}")));
    }
    if k.dim(D::Minus2)? != v.dim(D::Minus2)? {
        return Err(Error::Contract(format!("{} keys vs {dv}-dim values of different length", k.dim(D::Minus2)?)));
    }
    if let Some(m) = mask {
        let rows = m.to_dtype(DType::F32)?.max(D::Minus1)?.flatten_all()?.to_vec1::<f32>()?;
        if let Some(r) = rows.iter().position(|v| *v == f32::NEG_INFINITY) {
            return Err(Error::Contract(format!("query {r} has every key masked")));
        }
    }
    attend(q, k, v, mask)
}

/// Softmax weights for inspection, same scaling and masking as [`attention`].
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        let m = build_block_causal_mask(1, 5);
        assert_eq!(m.blocked(), 0);
        let m = build_block_causal_mask(2, 1);
        assert_eq!(m.entries(), &[0.0, f32::NEG_INFINITY, 0.0, 0.0]);
        assert_eq!(build_block_causal_mask(3, 2).blocked(), 12);
        for (t, n) in [(4, 3), (5, 2), (2, 7)] {
            let m = build_block_causal_mask(t, n);
            assert_eq!(m.blocked(), n * n * t * (t - 1) / 2);
            for q in 0..t * n {
                for k in 0..t * n {
                    assert_eq!(m.get(q, k) == 0.0, k / n <= q / n);
                }
            }
        }
    }

    #[test]
    fn single_key_returns_value() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[1f32, 0.0]], &dev).unwrap();
        let k = Tensor::new(&[[0f32, 3.0]], &dev).unwrap();
        let v = Tensor::new(&[[0.25f32, -7.0]], &dev).unwrap();
        let out = attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.to_vec2::<f32>().unwrap(), vec![vec![0.25, -7.0]]);
    }

    #[test]
    fn closed_form_weights() {
        let dev = Device::Cpu;
        // d = 4, scores scaled by 1/2: raw logits {0, 2 ln 3}
        let q = Tensor::new(&[[1f32, 0.0, 0.0, 0.0]], &dev).unwrap();
        let k = Tensor::new(&[[0f32, 0.0, 0.0, 0.0], [2.0 * 3f32.ln(), 0.0, 0.0, 0.0]], &dev).unwrap();
        let w = attention_weights(&q, &k, None).unwrap().to_vec2::<f32>().unwrap();
        assert!((w[0][0] - 0.25).abs() < 1e-6 && (w[0][1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn fully_masked_row_is_contract_violation() {
        let dev = Device::Cpu;
        let q = Tensor::ones((2, 2), DType::F32, &dev).unwrap();
        let mask = Tensor::new(&[[0f32, 0.0], [f32::NEG_INFINITY, f32::NEG_INFINITY]], &dev).unwrap();
        assert!(matches!(attention(&q, &q, &q, Some(&mask)), Err(Error::Contract(_))));
    }
}
