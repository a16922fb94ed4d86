use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use super::{silu, CodecConfig, BLOCK_FRAMES};
use crate::nn::conv;
use crate::Result;

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(vb: VarBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            a: conv(vb.pp("a"), c, c, 3, 1)?,
            b: conv(vb.pp("b"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&silu(&self.a.forward(x)?)?)?;
        Ok((x + h)?)
    }
}

/// Strictly per-frame 2-D autoencoder.
pub(super) struct Tiny {
    stem: Conv2d,
    down: [Conv2d; 3],
    enc_res: [ResBlock; 3],
    head: Conv2d,
    /// One learned offset per slot: bootstrap, then block positions 0..4.
    pos: Tensor,
    inp: Conv2d,
    dec_res: ResBlock,
    up: [Conv2d; 3],
    out: Conv2d,
}

impl Tiny {
    pub(super) fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        let cz = cfg.latent_channels;
        let e = vb.pp("enc");
        let d = vb.pp("dec");
        Ok(Self {
            stem: conv(e.pp("stem"), 3, c1, 3, 1)?,
            down: [
                conv(e.pp("down1"), c1, c2, 3, 2)?,
                conv(e.pp("down2"), c2, c3, 3, 2)?,
                conv(e.pp("down3"), c3, c3, 3, 2)?,
            ],
            enc_res: [
                ResBlock::new(e.pp("res1"), c2)?,
                ResBlock::new(e.pp("res2"), c3)?,
                ResBlock::new(e.pp("res3"), c3)?,
            ],
            head: conv(e.pp("head"), c3, cz, 3, 1)?,
            pos: d.get((1 + BLOCK_FRAMES, cz, 1, 1), "pos_zero_init")?,
            inp: conv(d.pp("inp"), cz, c3, 3, 1)?,
            dec_res: ResBlock::new(d.pp("res"), c3)?,
            up: [
                conv(d.pp("up1"), c3, c3, 3, 1)?,
                conv(d.pp("up2"), c3, c2, 3, 1)?,
                conv(d.pp("up3"), c2, c1, 3, 1)?,
            ],
            out: conv(d.pp("out"), c1, 3, 3, 1)?,
        })
    }

    pub(super) fn encode_frames(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = silu(&self.stem.forward(x)?)?;
        for (down, res) in self.down.iter().zip(&self.enc_res) {
            h = res.forward(&silu(&down.forward(&h)?)?)?;
        }
        Ok(self.head.forward(&h)?)
    }

    /// Per-frame latents to block latents: the bootstrap keeps its own,
    /// every 4-frame group is averaged.
    pub(super) fn group(&self, z: &Tensor, first: bool) -> Result<Tensor> {
        let (t, c, h, w) = z.dims4()?;
        let mut parts = Vec::new();
        let mut off = 0;
        if first {
            parts.push(z.narrow(0, 0, 1)?);
            off = 1;
        }
        let blocks = (t - off) / BLOCK_FRAMES;
        if blocks > 0 {
            let rest = z.narrow(0, off, blocks * BLOCK_FRAMES)?;
            parts.push(rest.reshape((blocks, BLOCK_FRAMES, c, h, w))?.mean(1)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub(super) fn decode_chunk(&self, z: &Tensor, first: bool) -> Result<Tensor> {
        let l = z.dim(0)?;
        let mut src = Vec::new();
        let mut slot = Vec::new();
        for j in 0..l {
            if first && j == 0 {
                src.push(0u32);
                slot.push(0u32);
            } else {
                for p in 0..BLOCK_FRAMES {
                    src.push(j as u32);
                    slot.push(1 + p as u32);
                }
            }
        }
        let dev = z.device();
        let n = src.len();
        let src = Tensor::from_vec(src, n, dev)?;
        let slot = Tensor::from_vec(slot, n, dev)?;
        let expanded = z.index_select(&src, 0)?.broadcast_add(&self.pos.index_select(&slot, 0)?)?;
        let mut h = self.dec_res.forward(&silu(&self.inp.forward(&expanded)?)?)?;
        for conv in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = silu(&conv.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?)?;
        }
        Ok(self.out.forward(&h)?)
    }
}
