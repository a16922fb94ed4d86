//! Video autoencoders mapping `T = 1 + 4m` raw frames to `L = 1 + m` latent
//! frames: the bootstrap frame alone, then one latent per 4-frame block.
//!
//! Two variants share the layout: a causal 3-D codec whose temporal
//! convolutions only look backwards, and a per-frame 2-D "tiny" codec that
//! averages each block's per-frame latents. Both stream exactly.

mod causal3d;
mod tiny;
mod train;

use candle_core::{Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

pub use train::{recon_mse, train_codec, CodecTrainConfig, CodecTrainReport};

use crate::nn::{self, NamedTensors};
use crate::video::Video;
use crate::{Error, Result};

pub const SPATIAL_FACTOR: usize = 8;
pub const BLOCK_FRAMES: usize = 4;

pub fn latent_frames(raw_frames: usize) -> Result<usize> {
    if raw_frames == 0 || (raw_frames - 1) % BLOCK_FRAMES != 0 {
        return Err(Error::RejectedInput(format!(
            "frame count {raw_frames} is not 1 + 4m"
        )));
    }
    Ok(1 + (raw_frames - 1) / BLOCK_FRAMES)
}

pub fn raw_frames(latent_frames: usize) -> usize {
    1 + BLOCK_FRAMES * latent_frames.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Causal3d,
    Tiny,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Causal3d => "causal3d",
            CodecKind::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub latent_channels: usize,
    /// Widths at 1/2, 1/4 and 1/8 resolution.
    pub channels: [usize; 3],
}

impl CodecConfig {
    pub fn new(kind: CodecKind) -> Self {
        Self {
            kind,
            latent_channels: 8,
            channels: [32, 64, 64],
        }
    }

    pub fn small(kind: CodecKind) -> Self {
        Self {
            kind,
            latent_channels: 8,
            channels: [16, 24, 32],
        }
    }
}

/// Everything needed to rebuild a codec from its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub config: CodecConfig,
    pub codec_id: String,
    pub spatial_factor: usize,
    /// Multiplies encoder means so latents have roughly unit variance.
    pub latent_scale: f64,
    /// Held-out per-pixel MSE bound fixed after training.
    pub recon_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LatentSequence {
    /// `(L, C_z, h, w)`.
    pub latents: Tensor,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec_id: String,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDirection {
    Encode,
    Decode,
}

/// Carried activations of every temporal layer plus a position counter.
///
/// For encoding `consumed` counts raw frames, for decoding latent frames.
#[derive(Debug, Clone)]
pub struct CodecStreamState {
    direction: StreamDirection,
    codec_id: String,
    consumed: usize,
    buffers: Vec<Option<Tensor>>,
}

impl CodecStreamState {
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn direction(&self) -> StreamDirection {
        self.direction
    }
}

enum Net {
    Causal3d(causal3d::Causal3d),
    Tiny(tiny::Tiny),
}

pub struct Codec {
    meta: CodecMeta,
    net: Net,
    device: Device,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec").field("meta", &self.meta).finish()
    }
}

impl Codec {
    fn build(meta: CodecMeta, vb: VarBuilder, device: &Device) -> Result<Self> {
        let net = match meta.config.kind {
            CodecKind::Causal3d => Net::Causal3d(causal3d::Causal3d::new(&meta.config, vb)?),
            CodecKind::Tiny => Net::Tiny(tiny::Tiny::new(&meta.config, vb)?),
        };
        Ok(Self {
            meta,
            net,
            device: device.clone(),
        })
    }

    /// Fresh trainable codec; the returned map owns its parameters.
    pub fn init(config: CodecConfig, seed: u64, device: &Device) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let meta = CodecMeta {
            config,
            codec_id: String::new(),
            spatial_factor: SPATIAL_FACTOR,
            latent_scale: 1.0,
            recon_bound: None,
        };
        let vb = VarBuilder::from_varmap(&varmap, candle_core::DType::F32, device);
        let mut codec = Self::build(meta, vb, device)?;
        nn::seeded_init(&varmap, seed)?;
        codec.refresh_id(&nn::snapshot(&varmap)?)?;
        Ok((codec, varmap))
    }

    pub fn from_tensors(meta: CodecMeta, tensors: &NamedTensors, device: &Device) -> Result<Self> {
        if meta.spatial_factor != SPATIAL_FACTOR {
            return Err(Error::Config(format!(
                "codec spatial factor {} unsupported",
                meta.spatial_factor
            )));
        }
        Self::build(meta, nn::frozen_builder(tensors, device), device)
    }

    pub(crate) fn refresh_id(&mut self, tensors: &NamedTensors) -> Result<()> {
        let hash = nn::tensor_hash(tensors)?;
        self.meta.codec_id = format!("{}-{}", self.meta.config.kind.name(), &hash[..12]);
        Ok(())
    }

    pub(crate) fn meta_mut(&mut self) -> &mut CodecMeta {
        &mut self.meta
    }

    pub fn meta(&self) -> &CodecMeta {
        &self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.codec_id
    }

    pub fn latent_channels(&self) -> usize {
        self.meta.config.latent_channels
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_frames(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (t, c, h, w) = x.dims4().map_err(|_| {
            Error::RejectedInput(format!("expected (T, 3, H, W) frames, got {:?}", x.dims()))
        })?;
        if c != 3 || h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::RejectedInput(format!(
                "frames of shape {:?} need 3 channels and sides divisible by {SPATIAL_FACTOR}",
                x.dims()
            )));
        }
        Ok((t, h, w))
    }

    fn buffers(&self) -> Vec<Option<Tensor>> {
        let n = match &self.net {
            Net::Causal3d(_) => causal3d::STREAM_LAYERS,
            Net::Tiny(_) => 0,
        };
        vec![None; n]
    }

    /// Encoder mean and log-variance for frames `(T', 3, H, W)`.
    ///
    /// `first` marks a chunk that starts with the bootstrap frame.
    fn encode_chunk(&self, x: &Tensor, buffers: &mut [Option<Tensor>], first: bool) -> Result<(Tensor, Option<Tensor>)> {
        match &self.net {
            Net::Causal3d(n) => {
                let (mean, logvar) = n.encode_chunk(x, buffers, first)?;
                Ok((mean, Some(logvar)))
            }
            Net::Tiny(n) => Ok((n.group(&n.encode_frames(x)?, first)?, None)),
        }
    }

    fn decode_chunk(&self, z: &Tensor, buffers: &mut [Option<Tensor>], first: bool) -> Result<Tensor> {
        match &self.net {
            Net::Causal3d(n) => n.decode_chunk(z, buffers, first),
            Net::Tiny(n) => n.decode_chunk(z, first),
        }
    }

    /// Unscaled mean/log-variance over a whole clip, for training.
    pub(crate) fn encode_raw(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let (t, _, _) = self.check_frames(x)?;
        latent_frames(t)?;
        self.encode_chunk(x, &mut self.buffers(), true)
    }

    /// Unclamped reconstruction from unscaled latents, for training.
    pub(crate) fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_chunk(z, &mut self.buffers(), true)
    }

    /// Encodes frames `(T, 3, H, W)` in `[-1, 1]` to their latent means.
    pub fn encode(&self, x: &Tensor) -> Result<LatentSequence> {
        let (t, h, w) = self.check_frames(x)?;
        latent_frames(t)?;
        let (mean, _) = self.encode_chunk(x, &mut self.buffers(), true)?;
        Ok(LatentSequence {
            latents: (mean * self.meta.latent_scale)?,
            frames: t,
            height: h,
            width: w,
            codec_id: self.meta.codec_id.clone(),
        })
    }

    pub fn encode_video(&self, video: &Video) -> Result<LatentSequence> {
        self.encode(&video.to_tensor(&self.device)?)
    }

    fn check_latents(&self, z: &Tensor) -> Result<(usize, usize, usize)> {
        let (l, c, h, w) = z.dims4().map_err(|_| {
            Error::RejectedInput(format!("expected (L, C, h, w) latents, got {:?}", z.dims()))
        })?;
        if c != self.latent_channels() || h == 0 || w == 0 {
            return Err(Error::RejectedInput(format!(
                "latents of shape {:?} do not match {} channels",
                z.dims(),
                self.latent_channels()
            )));
        }
        Ok((l, h, w))
    }

    /// Decodes to frames `(1 + 4(L-1), 3, H, W)` clamped to `[-1, 1]`.
    pub fn decode(&self, seq: &LatentSequence) -> Result<Tensor> {
        let (l, h, w) = self.check_latents(&seq.latents)?;
        if l == 0 {
            return Err(Error::RejectedInput("empty latent sequence".into()));
        }
        if seq.height != h * SPATIAL_FACTOR || seq.width != w * SPATIAL_FACTOR || seq.frames != raw_frames(l) {
            return Err(Error::RejectedInput(format!(
                "provenance {}x{}x{} disagrees with latent shape {:?}",
                seq.frames,
                seq.height,
                seq.width,
                seq.latents.dims()
            )));
        }
        let z = (&seq.latents / self.meta.latent_scale)?;
        Ok(self.decode_chunk(&z, &mut self.buffers(), true)?.clamp(-1f32, 1f32)?)
    }

    pub fn decode_video(&self, seq: &LatentSequence) -> Result<Video> {
        Video::from_tensor(&self.decode(seq)?)
    }

    pub fn stream_state(&self, direction: StreamDirection) -> CodecStreamState {
        CodecStreamState {
            direction,
            codec_id: self.meta.codec_id.clone(),
            consumed: 0,
            buffers: self.buffers(),
        }
    }

    fn check_state(&self, state: &CodecStreamState, direction: StreamDirection) -> Result<()> {
        if state.direction != direction {
            return Err(Error::Protocol(format!(
                "stream state is for {:?}, not {direction:?}",
                state.direction
            )));
        }
        if state.codec_id != self.meta.codec_id {
            return Err(Error::Protocol(format!(
                "stream state belongs to codec {}",
                state.codec_id
            )));
        }
        Ok(())
    }

    /// Feeds the bootstrap frame first, then 4-frame blocks; returns one
    /// latent frame `(1, C_z, h, w)` per call.
    pub fn encode_streaming(&self, state: &mut CodecStreamState, frames: &Tensor) -> Result<Tensor> {
        self.check_state(state, StreamDirection::Encode)?;
        let (t, _, _) = self.check_frames(frames).map_err(|e| Error::Protocol(e.to_string()))?;
        let expected = if state.consumed == 0 { 1 } else { BLOCK_FRAMES };
        if t != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} frame(s) after {} consumed, got {t}",
                state.consumed
            )));
        }
        let (mean, _) = self.encode_chunk(frames, &mut state.buffers, state.consumed == 0)?;
        state.consumed += t;
        Ok((mean * self.meta.latent_scale)?)
    }

    /// Decodes latent frame `index`, which must be the next unconsumed one;
    /// returns 1 raw frame for index 0 and 4 afterwards.
    pub fn decode_streaming(&self, state: &mut CodecStreamState, index: usize, latent: &Tensor) -> Result<Tensor> {
        self.check_state(state, StreamDirection::Decode)?;
        if index != state.consumed {
            return Err(Error::Protocol(format!(
                "latent frame {index} out of order, expected {}",
                state.consumed
            )));
        }
        let (l, _, _) = self.check_latents(latent).map_err(|e| Error::Protocol(e.to_string()))?;
        if l != 1 {
            return Err(Error::Protocol(format!("expected one latent frame, got {l}")));
        }
        let z = (latent / self.meta.latent_scale)?;
        let out = self.decode_chunk(&z, &mut state.buffers, index == 0)?.clamp(-1f32, 1f32)?;
        state.consumed += 1;
        Ok(out)
    }

    /// Per-frame tiny-codec latents `(T, C_z, h, w)`, before grouping.
    pub fn tiny_encode_frames(&self, x: &Tensor) -> Result<Tensor> {
        self.check_frames(x)?;
        match &self.net {
            Net::Tiny(n) => Ok((n.encode_frames(x)? * self.meta.latent_scale)?),
            Net::Causal3d(_) => Err(Error::Config("per-frame latents need the tiny codec".into())),
        }
    }
}

pub(crate) fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn frames(t: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        let v: Vec<f32> = (0..t * 3 * 16 * 24).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::from_vec(v, (t, 3, 16, 24), &Device::Cpu).unwrap()
    }

    fn codecs() -> Vec<Codec> {
        [CodecKind::Causal3d, CodecKind::Tiny]
            .into_iter()
            .map(|k| Codec::init(CodecConfig::small(k), 3, &Device::Cpu).unwrap().0)
            .collect()
    }

    #[test]
    fn latent_count_formula() {
        for m in 0..12 {
            assert_eq!(latent_frames(1 + 4 * m).unwrap(), 1 + m);
            assert_eq!(raw_frames(1 + m), 1 + 4 * m);
        }
        for t in [0, 2, 3, 4, 32] {
            assert!(matches!(latent_frames(t), Err(Error::RejectedInput(_))));
        }
    }

    #[test]
    fn shapes_and_rejections() {
        for codec in codecs() {
            let seq = codec.encode(&frames(9, 1)).unwrap();
            assert_eq!(seq.latents.dims(), &[3, 8, 2, 3]);
            assert_eq!(codec.decode(&seq).unwrap().dims(), &[9, 3, 16, 24]);
            assert!(matches!(codec.encode(&frames(8, 1)), Err(Error::RejectedInput(_))));
            let bad = LatentSequence {
                latents: Tensor::zeros((3, 5, 2, 3), candle_core::DType::F32, &Device::Cpu).unwrap(),
                ..seq
            };
            assert!(matches!(codec.decode(&bad), Err(Error::RejectedInput(_))));
        }
    }

    #[test]
    fn decode_is_clamped_and_deterministic() {
        for codec in codecs() {
            let seq = codec.encode(&frames(5, 2)).unwrap();
            let seq = LatentSequence {
                latents: (seq.latents * 50.0).unwrap(),
                ..seq
            };
            let a = codec.decode(&seq).unwrap();
            let b = codec.decode(&seq).unwrap();
            assert_eq!(nn::max_abs_diff(&a, &b).unwrap(), 0.0);
            let m = a.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
            assert!(m <= 1.0);
        }
    }

    #[test]
    fn encode_streaming_errors() {
        for codec in codecs() {
            let mut enc = codec.stream_state(StreamDirection::Encode);
            assert!(matches!(codec.encode_streaming(&mut enc, &frames(4, 1)), Err(Error::Protocol(_))));
            codec.encode_streaming(&mut enc, &frames(1, 1)).unwrap();
            assert!(matches!(codec.encode_streaming(&mut enc, &frames(3, 1)), Err(Error::Protocol(_))));
            let mut dec = codec.stream_state(StreamDirection::Decode);
            assert!(matches!(codec.encode_streaming(&mut dec, &frames(1, 1)), Err(Error::Protocol(_))));
        }
    }
}
