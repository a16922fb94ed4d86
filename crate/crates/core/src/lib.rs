//! Streaming cursor-object interaction synthesis.
//!
//! A bidirectional video diffusion transformer is trained on paired
//! control/target clips, converted into a block-causal autoregressive
//! generator under teacher forcing, and then refined with self-forcing
//! rollouts, distribution matching and adversarial objectives. The refined
//! generator runs in a streaming session that consumes a bootstrap frame
//! followed by 4-frame control blocks.
//!
//! Module map:
//!
//! - [`sprite_world`]: procedural paired clips (deformable, articulated, creature)
//! - [`latent_codec`]: causal 3-D codec and per-frame tiny codec, both streamable
//! - [`causal_dit`]: diffusion transformer with block-causal attention and KV cache
//! - [`flow_diffusion`]: rectified-flow interpolant, losses, few-step sampler
//! - [`refine_trainer`]: teacher, teacher-forced and self-forcing refinement stages
//! - [`stream_engine`]: live sessions, offline rendering, looped controls
//! - [`eval_metrics`]: toy Fréchet distances, motion smoothness, contact probe
//! - [`checkpoint`]: content-addressed checkpoint store

pub mod checkpoint;
pub mod causal_dit;
pub mod error;
pub mod eval_metrics;
pub mod experiment;
pub mod flow_diffusion;
pub mod latent_codec;
pub mod nn;
pub mod refine_trainer;
pub mod rng;
pub mod sprite_world;
pub mod stream_engine;
pub mod video;

pub use error::{Error, Result};
pub use video::{Image, Video};
