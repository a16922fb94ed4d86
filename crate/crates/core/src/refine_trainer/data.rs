use candle_core::Tensor;

use crate::causal_dit::build_condition;
use crate::latent_codec::Codec;
use crate::rng::SeededRng;
use crate::sprite_world::{Clip, SpriteClass};
use crate::Result;

/// A clip in latent space.
#[derive(Debug, Clone)]
pub struct LatentClip {
    pub id: String,
    pub class: SpriteClass,
    /// `(L, C, h, w)`; frame 0 is the bootstrap latent.
    pub target: Tensor,
    /// `(L, C, h, w)` control latents.
    pub control: Tensor,
    /// `(C, h, w)` latent of the first frame alone.
    pub first: Tensor,
}

impl LatentClip {
    pub fn encode(codec: &Codec, clip: &Clip) -> Result<Self> {
        let target = codec.encode_video(&clip.target)?.latents;
        let control = codec.encode_video(&clip.control)?.latents;
        let first = codec.encode_video(&clip.first_frame.as_video())?.latents.get(0)?;
        Ok(Self {
            id: clip.meta.id.clone(),
            class: clip.meta.sprite_class,
            target: target.detach(),
            control: control.detach(),
            first: first.detach(),
        })
    }

    pub fn frames(&self) -> usize {
        self.target.dim(0).unwrap_or(0)
    }
}

/// Stacked clips: `z` is `(B, L, C, h, w)`, `cond` `(B, L, 2C, h, w)`.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z: Tensor,
    pub cond: Tensor,
}

impl LatentBatch {
    pub fn new(clips: &[&LatentClip]) -> Result<Self> {
        let z = Tensor::stack(&clips.iter().map(|c| &c.target).collect::<Vec<_>>(), 0)?;
        let first = Tensor::stack(&clips.iter().map(|c| &c.first).collect::<Vec<_>>(), 0)?;
        let control = Tensor::stack(&clips.iter().map(|c| &c.control).collect::<Vec<_>>(), 0)?;
        Ok(Self {
            cond: build_condition(&first, &control)?,
            z,
        })
    }

    pub fn size(&self) -> usize {
        self.z.dim(0).unwrap_or(0)
    }

    pub fn frames(&self) -> usize {
        self.z.dim(1).unwrap_or(0)
    }

    /// `(B, 1, C, h, w)` clean bootstrap latents.
    pub fn bootstrap(&self) -> Result<Tensor> {
        Ok(self.z.narrow(1, 0, 1)?)
    }
}

/// Epoch-shuffled batch sampler.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng: SeededRng::new(seed),
            batch: batch.max(1).min(len.max(1)),
        }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self, clips: &[LatentClip]) -> Result<LatentBatch> {
        let idx = self.next_indices();
        LatentBatch::new(&idx.iter().map(|&i| &clips[i]).collect::<Vec<_>>())
    }
}
