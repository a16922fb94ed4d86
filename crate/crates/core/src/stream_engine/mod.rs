//! Live generation sessions: a bootstrap frame, then one latent frame per
//! 4-frame control block, with a KV cache and streaming codec states.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::causal_dit::{build_condition, CausalDit, DitConfig, KvCache};
use crate::flow_diffusion::{commit_frame, sample_frame, CachedDenoiser, NoiseSchedule};
use crate::latent_codec::{latent_frames, Codec, CodecConfig, CodecStreamState, StreamDirection, BLOCK_FRAMES};
use crate::nn;
use crate::rng::{derive_seed, SeededRng};
use crate::sprite_world::Clip;
use crate::{Error, Image, Result, Video};

/// Immutable weights shared by every session.
pub struct Generator {
    pub codec: Codec,
    pub model: CausalDit,
    /// Codec the model was trained against.
    pub model_codec_id: String,
}

impl Generator {
    pub fn new(codec: Codec, model: CausalDit, model_codec_id: impl Into<String>) -> Arc<Self> {
        Arc::new(Self {
            codec,
            model,
            model_codec_id: model_codec_id.into(),
        })
    }

    /// Untrained weights with a matching codec; for wiring checks and benchmarks.
    pub fn random(codec: CodecConfig, dit: DitConfig, seed: u64, device: &Device) -> Result<Arc<Self>> {
        let (c, vars) = Codec::init(codec, derive_seed(seed, 1), device)?;
        let codec = Codec::from_tensors(c.meta().clone(), &nn::snapshot(&vars)?, device)?;
        let varmap = VarMap::new();
        CausalDit::new(dit.clone(), VarBuilder::from_varmap(&varmap, DType::F32, device))?;
        nn::seeded_init(&varmap, derive_seed(seed, 2))?;
        let model = CausalDit::from_tensors(dit, &nn::snapshot(&varmap)?, device)?;
        let id = codec.id().to_string();
        Ok(Self::new(codec, model, id))
    }

    pub fn device(&self) -> &Device {
        self.codec.device()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub seed: u64,
    pub schedule: NoiseSchedule,
    /// Recent latent frames kept in the KV cache besides the bootstrap frame.
    pub window: Option<usize>,
    /// Latent frames the cache may hold when there is no window.
    pub max_frames: Option<usize>,
    /// Length of the per-block timing ring buffer.
    pub timing_history: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: NoiseSchedule::default(),
            window: None,
            max_frames: Some(256),
            timing_history: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub frames_emitted: usize,
    pub blocks: usize,
    pub open_ms: f64,
    /// Control receipt to first decoded pixel of the first block.
    pub first_block_latency_ms: Option<f64>,
    pub last_block_ms: Option<f64>,
    pub per_block_ms: VecDeque<f64>,
    /// Model plus codec wall time, including the bootstrap.
    pub busy_ms: f64,
}

impl SessionStats {
    pub fn fps(&self) -> f64 {
        if self.busy_ms > 0.0 {
            self.frames_emitted as f64 / (self.busy_ms / 1000.0)
        } else {
            0.0
        }
    }
}

static SESSION_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct Session {
    id: String,
    generator: Arc<Generator>,
    cache: KvCache,
    encoder: CodecStreamState,
    decoder: CodecStreamState,
    schedule: NoiseSchedule,
    rng: SeededRng,
    bootstrap: Tensor,
    bootstrap_frame: Tensor,
    stats: SessionStats,
    timing_history: usize,
}

/// Encodes the first frame to the bootstrap latent, commits it to the cache
/// and decodes it back as the first emitted frame. `first_control` is control
/// frame 0; when absent the first frame stands in for it.
pub fn open_session(
    generator: Arc<Generator>,
    first_frame: &Image,
    first_control: Option<&Image>,
    options: &SessionOptions,
) -> Result<Session> {
    let start = Instant::now();
    if generator.codec.id() != generator.model_codec_id {
        return Err(Error::Config(format!(
            "model expects codec {}, got {}",
            generator.model_codec_id,
            generator.codec.id()
        )));
    }
    if !generator.model.config().conditioned {
        return Err(Error::Config("streaming needs a conditioned model".into()));
    }
    if let Some(c) = first_control {
        if (c.height, c.width) != (first_frame.height, first_frame.width) {
            return Err(Error::RejectedInput("first control frame differs in size".into()));
        }
    }
    let dev = generator.device().clone();
    let codec = &generator.codec;
    let x0 = first_frame.to_tensor(&dev)?;
    let mut enc0 = codec.stream_state(StreamDirection::Encode);
    let bootstrap = codec.encode_streaming(&mut enc0, &x0)?;

    let mut encoder = codec.stream_state(StreamDirection::Encode);
    let c0 = codec.encode_streaming(&mut encoder, &first_control.unwrap_or(first_frame).to_tensor(&dev)?)?;
    let cond0 = build_condition(&bootstrap, &c0.unsqueeze(0)?)?;

    let mut cache = generator
        .model
        .new_cache()
        .with_window(options.window)
        .with_capacity(options.max_frames);
    commit_frame(&generator.model, &mut cache, &bootstrap.unsqueeze(0)?, Some(&cond0))?;
    let mut decoder = codec.stream_state(StreamDirection::Decode);
    let bootstrap_frame = codec.decode_streaming(&mut decoder, 0, &bootstrap)?;

    let open_ms = start.elapsed().as_secs_f64() * 1000.0;
    let id = format!("s{:06}", SESSION_COUNTER.fetch_add(1, Ordering::Relaxed));
    tracing::debug!(session = %id, open_ms, "session opened");
    Ok(Session {
        id,
        generator,
        cache,
        encoder,
        decoder,
        schedule: options.schedule.clone(),
        rng: SeededRng::new(options.seed),
        bootstrap,
        bootstrap_frame,
        stats: SessionStats {
            frames_emitted: 1,
            open_ms,
            busy_ms: open_ms,
            ..Default::default()
        },
        timing_history: options.timing_history.max(1),
    })
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    /// `(1, C, h, w)` latent of the first frame.
    pub fn bootstrap_latent(&self) -> &Tensor {
        &self.bootstrap
    }

    /// Decoded first frame `(1, 3, H, W)`.
    pub fn bootstrap_frame(&self) -> &Tensor {
        &self.bootstrap_frame
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Generates the 4 frames `(4, 3, H, W)` answering one control block.
    pub fn push_control_block(&mut self, frames: &Tensor) -> Result<Tensor> {
        let received = Instant::now();
        let t = frames.dims().first().copied().unwrap_or(0);
        if frames.rank() != 4 || t != BLOCK_FRAMES {
            return Err(Error::Protocol(format!(
                "control block must be ({BLOCK_FRAMES}, 3, H, W), got {:?}",
                frames.dims()
            )));
        }
        let g = &self.generator;
        let index = self.stats.blocks + 1;
        let c = g.codec.encode_streaming(&mut self.encoder, frames)?;
        let cond = build_condition(&self.bootstrap, &c.unsqueeze(0)?)?;
        let shape = self.bootstrap.unsqueeze(0)?.shape().clone();
        let z = {
            let mut den = CachedDenoiser {
                model: &g.model,
                cache: &self.cache,
                cond: Some(cond.clone()),
            };
            sample_frame(&mut den, &self.schedule, &shape, g.device(), &mut self.rng, None)?
        };
        commit_frame(&g.model, &mut self.cache, &z, Some(&cond))?;
        let out = g.codec.decode_streaming(&mut self.decoder, index, &z.squeeze(0)?)?;
        let ms = received.elapsed().as_secs_f64() * 1000.0;

        let s = &mut self.stats;
        s.blocks += 1;
        s.frames_emitted += BLOCK_FRAMES;
        s.busy_ms += ms;
        s.last_block_ms = Some(ms);
        s.first_block_latency_ms.get_or_insert(ms);
        if s.per_block_ms.len() == self.timing_history {
            s.per_block_ms.pop_front();
        }
        s.per_block_ms.push_back(ms);
        tracing::debug!(session = %self.id, block = index, ms, "block");
        Ok(out)
    }

    /// Byte-video entry point for [`Session::push_control_block`].
    pub fn push_control_video(&mut self, block: &Video) -> Result<Video> {
        if block.frames != BLOCK_FRAMES {
            return Err(Error::Protocol(format!(
                "control block must have {BLOCK_FRAMES} frames, got {}",
                block.frames
            )));
        }
        let x = block.to_tensor(self.generator.device())?;
        Video::from_tensor(&self.push_control_block(&x)?)
    }
}

#[derive(Debug, Clone)]
pub struct OfflineResult {
    /// `(T, 3, H, W)` in `[-1, 1]`.
    pub frames: Tensor,
    pub stats: SessionStats,
}

impl OfflineResult {
    pub fn video(&self) -> Result<Video> {
        Video::from_tensor(&self.frames)
    }
}

/// Drives a session over a whole control video, block by block.
pub fn run_offline_control(
    generator: Arc<Generator>,
    first_frame: &Image,
    control: &Video,
    options: &SessionOptions,
) -> Result<OfflineResult> {
    latent_frames(control.frames)?;
    if control.frames < 1 {
        return Err(Error::RejectedInput("empty control video".into()));
    }
    let first_control = control.frame(0);
    let mut session = open_session(generator, first_frame, Some(&first_control), options)?;
    let dev = session.generator.device().clone();
    let x = control.to_tensor(&dev)?;
    let mut out = vec![session.bootstrap_frame().clone()];
    for b in 0..(control.frames - 1) / BLOCK_FRAMES {
        out.push(session.push_control_block(&x.narrow(0, 1 + b * BLOCK_FRAMES, BLOCK_FRAMES)?)?);
    }
    Ok(OfflineResult {
        frames: Tensor::cat(&out, 0)?,
        stats: session.stats().clone(),
    })
}

/// Generates a clip's target from its first frame and control video.
pub fn run_offline(generator: Arc<Generator>, clip: &Clip, seed: u64) -> Result<OfflineResult> {
    let options = SessionOptions {
        seed,
        ..Default::default()
    };
    run_offline_control(generator, &clip.first_frame, &clip.control, &options)
}

/// Alternates the control forward and backward `repeats` times, sharing the
/// frame at each junction, so `T' = 1 + repeats * (T - 1)`.
pub fn loop_control(control: &Video, repeats: usize) -> Result<Video> {
    if repeats == 0 {
        return Err(Error::RejectedInput("repeats must be at least 1".into()));
    }
    if control.frames < 2 {
        return Err(Error::RejectedInput("control video needs at least 2 frames".into()));
    }
    let rev = control.reversed();
    let mut parts = vec![control.clone()];
    for r in 1..repeats {
        let src = if r % 2 == 1 { &rev } else { control };
        parts.push(src.slice(1, control.frames - 1)?);
    }
    Video::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> Video {
        let data = (0..frames * 2 * 2 * 3).map(|i| (i / 12) as u8).collect();
        Video::from_raw(frames, 2, 2, data).unwrap()
    }

    #[test]
    fn loop_lengths_and_junctions() {
        let c = ramp(33);
        assert_eq!(loop_control(&c, 1).unwrap(), c);
        let l = loop_control(&c, 5).unwrap();
        assert_eq!(l.frames, 161);
        for j in [32, 64, 96, 128] {
            assert_eq!(l.frame_bytes(j - 1), l.frame_bytes(j + 1));
        }
        assert_eq!(l.frame_bytes(64), c.frame_bytes(0));
        assert!(loop_control(&c, 0).is_err());
    }
}
