use candle_core::{Device, Tensor, D};

use crate::{Error, Result};

const BASE: f64 = 10_000.0;

/// Rotary embedding over (frame, row, col) token coordinates. The head
/// dimension is split d/2 : d/4 : d/4 between the three axes, each using
/// the rotate-half layout.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    grid: (usize, usize),
}

impl Rope {
    pub fn new(head_dim: usize, grid: (usize, usize)) -> Result<Self> {
        if head_dim % 8 != 0 {
            return Err(Error::Config(format!("head dim {head_dim} must be divisible by 8")));
        }
        Ok(Self { head_dim, grid })
    }

    fn sections(&self) -> [usize; 3] {
        [self.head_dim / 2, self.head_dim / 4, self.head_dim / 4]
    }

    /// `(cos, sin)` tables of shape `(frames.len() * rows * cols, d)`.
    pub fn tables(&self, frames: &[usize], device: &Device) -> Result<(Tensor, Tensor)> {
        let (gh, gw) = self.grid;
        let d = self.head_dim;
        let n = frames.len() * gh * gw;
        let mut cos = Vec::with_capacity(n * d);
        let mut sin = Vec::with_capacity(n * d);
        for &f in frames {
            for r in 0..gh {
                for c in 0..gw {
                    for (pos, sec) in [f, r, c].into_iter().zip(self.sections()) {
                        let half = sec / 2;
                        for _ in 0..2 {
                            for i in 0..half {
                                let freq = BASE.powf(-((2 * i) as f64) / sec as f64);
                                let a = pos as f64 * freq;
                                cos.push(a.cos() as f32);
                                sin.push(a.sin() as f32);
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(cos, (n, d), device)?,
            Tensor::from_vec(sin, (n, d), device)?,
        ))
    }

    fn rotate_half(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(6);
        let mut off = 0;
        for sec in self.sections() {
            let half = sec / 2;
            parts.push(x.narrow(D::Minus1, off + half, half)?.neg()?);
            parts.push(x.narrow(D::Minus1, off, half)?);
            off += sec;
        }
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }

    /// Rotates `x` of shape `(..., N, d)`.
    pub fn apply(&self, x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let rot = self.rotate_half(x)?;
        Ok((x.broadcast_mul(cos)? + rot.broadcast_mul(sin)?)?)
    }
}
