//! Procedural paired clips of a cursor ("hand") interacting with one object.
//!
//! Each clip carries a control video (background + cursor only), a target
//! video (background + responding object + cursor) and the simulator's ground
//! truth. Three object classes exist: a damped spring-mass blob, a single-hinge
//! flap, and an autonomous creature that reacts to cursor proximity.

mod dataset;
pub mod physics;
pub mod raster;
mod storage;

use serde::{Deserialize, Serialize};

pub use dataset::{build_dataset, generate_dataset, read_index, DatasetSpec, IndexEntry, Split};
pub use physics::{ObjectState, SceneParams, CURSOR_RADIUS};
pub use storage::{read_clip, write_clip, write_frame_dir};

use crate::latent_codec::SPATIAL_FACTOR;
use crate::rng::{derive_seed, SeededRng};
use crate::video::{Image, Video};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteClass {
    Deformable,
    Articulated,
    Creature,
}

impl SpriteClass {
    pub const ALL: [SpriteClass; 3] = [SpriteClass::Deformable, SpriteClass::Articulated, SpriteClass::Creature];

    pub fn name(self) -> &'static str {
        match self {
            SpriteClass::Deformable => "deformable",
            SpriteClass::Articulated => "articulated",
            SpriteClass::Creature => "creature",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for SpriteClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SpriteClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deformable" => Ok(SpriteClass::Deformable),
            "articulated" => Ok(SpriteClass::Articulated),
            "creature" => Ok(SpriteClass::Creature),
            other => Err(Error::RejectedInput(format!("unknown sprite class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub frame: usize,
    pub position: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub sprite_class: SpriteClass,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Onsets of cursor-object contact.
    pub contact_events: Vec<ContactEvent>,
    /// Per-frame contact state.
    pub contact: Vec<bool>,
    pub cursor_track: Vec<[f32; 2]>,
    /// Union of object pixels over the clip, `[x0, y0, x1, y1)`.
    pub object_box: [usize; 4],
}

impl ClipMeta {
    pub fn first_contact(&self) -> Option<usize> {
        self.contact_events.first().map(|e| e.frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub first_frame: Image,
    pub control: Video,
    pub target: Video,
    pub meta: ClipMeta,
}

pub fn validate_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames < 5 || (frames - 1) % 4 != 0 {
        return Err(Error::RejectedInput(format!(
            "clip length {frames} is not 1 + 4m with m >= 1"
        )));
    }
    if height == 0 || width == 0 || height % SPATIAL_FACTOR != 0 || width % SPATIAL_FACTOR != 0 {
        return Err(Error::RejectedInput(format!(
            "frame size {height}x{width} is not a positive multiple of {SPATIAL_FACTOR}"
        )));
    }
    Ok(())
}

/// Scene parameters and cursor track for a clip, before simulation.
pub fn sample_scene(class: SpriteClass, seed: u64, frames: usize, height: usize, width: usize) -> (SceneParams, Vec<[f32; 2]>) {
    let mut rng = SeededRng::new(derive_seed(seed, class.index() as u64 + 1));
    let params = SceneParams::sample(class, height, width, &mut rng);
    let track = physics::sample_cursor_track(&params, frames, &mut rng);
    (params, track)
}

/// Renders a clip for an explicit scene and cursor track.
pub fn render_clip(params: &SceneParams, seed: u64, cursor: &[[f32; 2]]) -> Result<Clip> {
    let (h, w, frames) = (params.height, params.width, cursor.len());
    validate_dims(frames, h, w)?;
    let states = physics::simulate(params, cursor);
    let background = params.render_background();

    let mut control = Vec::with_capacity(frames);
    let mut target = Vec::with_capacity(frames);
    let mut bbox = [usize::MAX, usize::MAX, 0, 0];
    for (t, state) in states.iter().enumerate() {
        let mut ctl = background.clone();
        physics::draw_cursor(&mut ctl, cursor[t]);
        control.push(ctl);

        let mut tgt = background.clone();
        physics::draw_object(&mut tgt, params, state);
        // object footprint, measured before the cursor is composited on top
        for y in 0..h {
            for x in 0..w {
                if tgt.get(x, y) != background.get(x, y) {
                    bbox[0] = bbox[0].min(x);
                    bbox[1] = bbox[1].min(y);
                    bbox[2] = bbox[2].max(x + 1);
                    bbox[3] = bbox[3].max(y + 1);
                }
            }
        }
        physics::draw_cursor(&mut tgt, cursor[t]);
        target.push(tgt);
    }
    if bbox[0] == usize::MAX {
        bbox = [0, 0, 0, 0];
    }

    let mut contact_events = Vec::new();
    let mut prev = false;
    for (t, s) in states.iter().enumerate() {
        if s.contact && !prev {
            contact_events.push(ContactEvent {
                frame: t,
                position: cursor[t],
            });
        }
        prev = s.contact;
    }

    let meta = ClipMeta {
        id: format!("{}-{seed:016x}", params.class),
        sprite_class: params.class,
        seed,
        frames,
        height: h,
        width: w,
        contact_events,
        contact: states.iter().map(|s| s.contact).collect(),
        cursor_track: cursor.to_vec(),
        object_box: bbox,
    };
    Ok(Clip {
        first_frame: target[0].clone(),
        control: Video::from_frames(&control)?,
        target: Video::from_frames(&target)?,
        meta,
    })
}

/// Deterministic clip generator: a pure function of its arguments.
pub fn generate_clip(class: SpriteClass, seed: u64, frames: usize, height: usize, width: usize) -> Result<Clip> {
    validate_dims(frames, height, width)?;
    let (params, track) = sample_scene(class, seed, frames, height, width);
    render_clip(&params, seed, &track)
}

/// Boolean mask of pixels covered by the cursor glyph at `p`.
pub fn cursor_mask(height: usize, width: usize, p: [f32; 2]) -> Vec<bool> {
    let mut img = Image::new(height, width);
    physics::draw_cursor(&mut img, p);
    img.data.chunks(3).map(|px| px != [0, 0, 0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid_track(class: SpriteClass, seed: u64, frames: usize) -> (Vec<ObjectState>, Clip) {
        let (params, track) = sample_scene(class, seed, frames, 64, 64);
        let states = physics::simulate(&params, &track);
        (states, generate_clip(class, seed, frames, 64, 64).unwrap())
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_clip(SpriteClass::Deformable, 7, 33, 64, 64).unwrap();
        let b = generate_clip(SpriteClass::Deformable, 7, 33, 64, 64).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(SpriteClass::Deformable, 8, 33, 64, 64).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            generate_clip(SpriteClass::Creature, 1, 32, 64, 64),
            Err(Error::RejectedInput(_))
        ));
        assert!(matches!(
            generate_clip(SpriteClass::Creature, 1, 1, 64, 64),
            Err(Error::RejectedInput(_))
        ));
        assert!(matches!(
            generate_clip(SpriteClass::Creature, 1, 33, 60, 64),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn first_frame_and_cursor_identity() {
        for class in SpriteClass::ALL {
            let clip = generate_clip(class, 3, 17, 32, 32).unwrap();
            assert_eq!(clip.first_frame, clip.target.frame(0));
            for t in 0..clip.meta.frames {
                let mask = cursor_mask(32, 32, clip.meta.cursor_track[t]);
                let (c, g) = (clip.control.frame_bytes(t), clip.target.frame_bytes(t));
                for (p, m) in mask.iter().enumerate() {
                    if *m {
                        assert_eq!(c[p * 3..p * 3 + 3], g[p * 3..p * 3 + 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn control_contains_no_object_pixels() {
        let clip = generate_clip(SpriteClass::Articulated, 5, 9, 64, 64).unwrap();
        let (params, _) = sample_scene(SpriteClass::Articulated, 5, 9, 64, 64);
        let bg = params.render_background();
        for t in 0..clip.meta.frames {
            let mask = cursor_mask(64, 64, clip.meta.cursor_track[t]);
            let frame = clip.control.frame(t);
            for y in 0..64 {
                for x in 0..64 {
                    if !mask[y * 64 + x] {
                        assert_eq!(frame.get(x, y), bg.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn deformable_centroid_responds_to_first_contact() {
        let (states, clip) = centroid_track(SpriteClass::Deformable, 7, 33);
        let first = clip.meta.first_contact().expect("seed 7 touches the blob");
        let c0 = states[0].centroid;
        let disp = |s: &ObjectState| ((s.centroid[0] - c0[0]).powi(2) + (s.centroid[1] - c0[1]).powi(2)).sqrt();
        for s in &states[..first] {
            assert_eq!(disp(s), 0.0);
        }
        assert!(states[first..(first + 5).min(33)].iter().any(|s| disp(s) > 0.0));
    }

    #[test]
    fn target_object_static_before_contact() {
        for class in [SpriteClass::Deformable, SpriteClass::Articulated] {
            for seed in 0..6 {
                let clip = generate_clip(class, seed, 17, 32, 32).unwrap();
                let Some(first) = clip.meta.first_contact() else { continue };
                let [x0, y0, x1, y1] = clip.meta.object_box;
                for t in 1..first {
                    let m0 = cursor_mask(32, 32, clip.meta.cursor_track[t - 1]);
                    let m1 = cursor_mask(32, 32, clip.meta.cursor_track[t]);
                    let (a, b) = (clip.target.frame(t - 1), clip.target.frame(t));
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if !m0[y * 32 + x] && !m1[y * 32 + x] {
                                assert_eq!(a.get(x, y), b.get(x, y), "{class} seed {seed} frame {t}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn flap_without_contact_keeps_its_angle() {
        let (params, _) = sample_scene(SpriteClass::Articulated, 11, 33, 64, 64);
        // park the cursor in a corner far from the hinge
        let track = vec![[2.0, 62.0]; 33];
        let states = physics::simulate(&params, &track);
        assert!(states.iter().all(|s| !s.contact));
        assert!(states.iter().all(|s| s.angle == states[0].angle));
        let clip = render_clip(&params, 11, &track).unwrap();
        assert!(clip.meta.contact_events.is_empty());
        for t in 1..33 {
            assert_eq!(clip.target.frame_bytes(t), clip.target.frame_bytes(0));
        }
    }

    #[test]
    fn object_state_depends_only_on_past_cursor() {
        for class in SpriteClass::ALL {
            let (params, track) = sample_scene(class, 21, 33, 64, 64);
            let full = physics::simulate(&params, &track);
            for cut in [5usize, 12, 20] {
                let mut altered = track.clone();
                for p in altered.iter_mut().skip(cut) {
                    *p = [1.0, 1.0];
                }
                let replay = physics::simulate(&params, &altered);
                assert_eq!(full[..cut], replay[..cut], "{class} cut {cut}");
            }
        }
    }

    #[test]
    fn most_clips_have_contact() {
        let mut hits = 0;
        for seed in 0..30 {
            let class = SpriteClass::ALL[seed % 3];
            if generate_clip(class, seed as u64, 33, 64, 64).unwrap().meta.first_contact().is_some() {
                hits += 1;
            }
        }
        assert!(hits >= 24, "only {hits}/30 clips touch the object");
    }
}
