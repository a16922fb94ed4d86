use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use super::{silu, CodecConfig, BLOCK_FRAMES};
use crate::nn::conv;
use crate::Result;

/// Temporal layers carrying stream buffers: two in the encoder, two in the decoder.
pub(super) const STREAM_LAYERS: usize = 4;
const ENC_A: usize = 0;
const ENC_B: usize = 1;
const DEC_C: usize = 2;
const DEC_D: usize = 3;

/// Causal convolution along the frame axis (frames are the batch axis).
/// Each tap is a 1x1 spatial conv; history is zero-padded on the left.
struct TemporalConv {
    taps: Vec<Conv2d>,
}

impl TemporalConv {
    fn new(vb: VarBuilder, c: usize, kt: usize) -> Result<Self> {
        let taps = (0..kt)
            .map(|k| conv(vb.pp(format!("tap{k}")), c, c, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self { taps })
    }

    fn context(&self) -> usize {
        self.taps.len() - 1
    }

    /// Consumes new frames `x` given the previous `context()` input frames
    /// stored in `buf`, and leaves the latest history in `buf`.
    fn forward(&self, x: &Tensor, buf: &mut Option<Tensor>) -> Result<Tensor> {
        let ctx = self.context();
        let (n, c, h, w) = x.dims4()?;
        let prev = match buf.take() {
            Some(p) => p,
            None => Tensor::zeros((ctx, c, h, w), x.dtype(), x.device())?,
        };
        let full = Tensor::cat(&[&prev, x], 0)?;
        let mut out = self.taps[0].forward(&full.narrow(0, 0, n)?)?;
        for (k, tap) in self.taps.iter().enumerate().skip(1) {
            out = (out + tap.forward(&full.narrow(0, k, n)?)?)?;
        }
        *buf = Some(full.narrow(0, full.dim(0)? - ctx, ctx)?.detach());
        Ok(out)
    }

    fn residual(&self, x: &Tensor, buf: &mut Option<Tensor>) -> Result<Tensor> {
        Ok((x + silu(&self.forward(x, buf)?)?)?)
    }
}

pub(super) struct Causal3d {
    stem: Conv2d,
    down: [Conv2d; 3],
    tconv_a: TemporalConv,
    pack: Conv2d,
    tconv_b: TemporalConv,
    head: Conv2d,
    inp: Conv2d,
    tconv_c: TemporalConv,
    unpack: Conv2d,
    tconv_d: TemporalConv,
    up: [Conv2d; 3],
    out: Conv2d,
    c3: usize,
}

impl Causal3d {
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
            tconv_a: TemporalConv::new(e.pp("tconv_a"), c2, 3)?,
            pack: conv(e.pp("pack"), BLOCK_FRAMES * c3, c3, 1, 1)?,
            tconv_b: TemporalConv::new(e.pp("tconv_b"), c3, 2)?,
            head: conv(e.pp("head"), c3, 2 * cz, 3, 1)?,
            inp: conv(d.pp("inp"), cz, c3, 3, 1)?,
            tconv_c: TemporalConv::new(d.pp("tconv_c"), c3, 2)?,
            unpack: conv(d.pp("unpack"), c3, BLOCK_FRAMES * c3, 1, 1)?,
            tconv_d: TemporalConv::new(d.pp("tconv_d"), c3, 3)?,
            up: [
                conv(d.pp("up1"), c3, c3, 3, 1)?,
                conv(d.pp("up2"), c3, c2, 3, 1)?,
                conv(d.pp("up3"), c2, c1, 3, 1)?,
            ],
            out: conv(d.pp("out"), c1, 3, 3, 1)?,
            c3,
        })
    }

    pub(super) fn encode_chunk(&self, x: &Tensor, bufs: &mut [Option<Tensor>], first: bool) -> Result<(Tensor, Tensor)> {
        let h = silu(&self.stem.forward(x)?)?;
        let h = silu(&self.down[0].forward(&h)?)?;
        let h = self.tconv_a.residual(&h, &mut bufs[ENC_A])?;
        let h = silu(&self.down[1].forward(&h)?)?;
        let h = silu(&self.down[2].forward(&h)?)?;
        let (t, c, hh, ww) = h.dims4()?;
        let mut groups = Vec::new();
        let mut off = 0;
        if first {
            let f0 = h.narrow(0, 0, 1)?;
            groups.push(Tensor::cat(&[&f0; BLOCK_FRAMES], 1)?);
            off = 1;
        }
        let blocks = (t - off) / BLOCK_FRAMES;
        if blocks > 0 {
            let rest = h.narrow(0, off, blocks * BLOCK_FRAMES)?;
            groups.push(rest.reshape((blocks, BLOCK_FRAMES * c, hh, ww))?);
        }
        let packed = Tensor::cat(&groups, 0)?;
        let z = silu(&self.pack.forward(&packed)?)?;
        let z = self.tconv_b.residual(&z, &mut bufs[ENC_B])?;
        let stats = self.head.forward(&z)?;
        let cz = stats.dim(1)? / 2;
        let mean = stats.narrow(1, 0, cz)?;
        let logvar = stats.narrow(1, cz, cz)?.clamp(-10f32, 10f32)?;
        Ok((mean, logvar))
    }

    pub(super) fn decode_chunk(&self, z: &Tensor, bufs: &mut [Option<Tensor>], first: bool) -> Result<Tensor> {
        let h = silu(&self.inp.forward(z)?)?;
        let h = self.tconv_c.residual(&h, &mut bufs[DEC_C])?;
        let (l, _, hh, ww) = h.dims4()?;
        let u = silu(&self.unpack.forward(&h)?)?;
        let frames = u.reshape((l * BLOCK_FRAMES, self.c3, hh, ww))?;
        // the bootstrap latent expands to the last sub-frame of its group only
        let frames = if first {
            frames.narrow(0, BLOCK_FRAMES - 1, frames.dim(0)? - (BLOCK_FRAMES - 1))?
        } else {
            frames
        };
        let mut h = self.tconv_d.residual(&frames, &mut bufs[DEC_D])?;
        for conv in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = silu(&conv.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?)?;
        }
        Ok(self.out.forward(&h)?)
    }
}
