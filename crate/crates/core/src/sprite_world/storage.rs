//! On-disk clip layout:
//!
//! ```text
//! <root>/<id>/manifest.json      meta + sha256 of every frame's RGB bytes
//! <root>/<id>/first_frame.png
//! <root>/<id>/control/NNNN.png
//! <root>/<id>/target/NNNN.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Clip, ClipMeta};
use crate::error::IoContext;
use crate::video::{Image, Video};
use crate::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checksums {
    first_frame: String,
    control: Vec<String>,
    target: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: ClipMeta,
    checksums: Checksums,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

fn load_png(path: &Path, dir: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptClip {
            path: dir.to_path_buf(),
            reason: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    Image::from_raw(img.height() as usize, img.width() as usize, img.into_raw())
}

fn write_frames(dir: &Path, video: &Video) -> Result<Vec<String>> {
    fs::create_dir_all(dir).at(dir)?;
    (0..video.frames)
        .map(|t| {
            let frame = video.frame(t);
            save_png(&dir.join(format!("{t:04}.png")), &frame)?;
            Ok(digest(&frame.data))
        })
        .collect()
}

/// Lossless frame directory: `dir/NNNN.png`, one file per frame.
pub fn write_frame_dir(video: &Video, dir: &Path) -> Result<()> {
    write_frames(dir, video).map(|_| ())
}

/// Writes the clip under `root/<meta.id>` and returns that directory.
pub fn write_clip(clip: &Clip, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&clip.meta.id);
    fs::create_dir_all(&dir).at(&dir)?;
    save_png(&dir.join("first_frame.png"), &clip.first_frame)?;
    let checksums = Checksums {
        first_frame: digest(&clip.first_frame.data),
        control: write_frames(&dir.join("control"), &clip.control)?,
        target: write_frames(&dir.join("target"), &clip.target)?,
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        meta: clip.meta.clone(),
        checksums,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(dir)
}

fn read_frames(clip_dir: &Path, sub: &str, meta: &ClipMeta, sums: &[String]) -> Result<Video> {
    let corrupt = |reason: String| Error::CorruptClip {
        path: clip_dir.to_path_buf(),
        reason,
    };
    let dir = clip_dir.join(sub);
    let mut names: Vec<_> = fs::read_dir(&dir)
        .at(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.len() != meta.frames || sums.len() != meta.frames {
        return Err(corrupt(format!(
            "{sub}: manifest declares {} frames, found {} files and {} checksums",
            meta.frames,
            names.len(),
            sums.len()
        )));
    }
    let mut frames = Vec::with_capacity(meta.frames);
    for (t, sum) in sums.iter().enumerate() {
        let img = load_png(&dir.join(format!("{t:04}.png")), clip_dir)?;
        if img.height != meta.height || img.width != meta.width {
            return Err(corrupt(format!("{sub}/{t:04}.png has the wrong size")));
        }
        if &digest(&img.data) != sum {
            return Err(corrupt(format!("{sub}/{t:04}.png checksum mismatch")));
        }
        frames.push(img);
    }
    Video::from_frames(&frames)
}

pub fn read_clip(clip_dir: &Path) -> Result<Clip> {
    let path = clip_dir.join("manifest.json");
    let bytes = fs::read(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::CorruptClip {
        path: clip_dir.to_path_buf(),
        reason: format!("unreadable manifest: {e}"),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::CorruptClip {
            path: clip_dir.to_path_buf(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let meta = manifest.meta;
    let first_frame = load_png(&clip_dir.join("first_frame.png"), clip_dir)?;
    if digest(&first_frame.data) != manifest.checksums.first_frame {
        return Err(Error::CorruptClip {
            path: clip_dir.to_path_buf(),
            reason: "first_frame.png checksum mismatch".into(),
        });
    }
    let control = read_frames(clip_dir, "control", &meta, &manifest.checksums.control)?;
    let target = read_frames(clip_dir, "target", &meta, &manifest.checksums.target)?;
    Ok(Clip {
        first_frame,
        control,
        target,
        meta,
    })
}
