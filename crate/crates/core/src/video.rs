//! RGB8 frame buffers and their conversion to model tensors.
//!
//! Pixels are stored as interleaved RGB bytes, row-major within a frame and
//! frame-major across a video. Model-side tensors use `(T, 3, H, W)` f32 in
//! `[-1, 1]`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

#[inline]
pub fn unit_to_byte(x: f32) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    ((x + 1.0) * 127.5).round() as u8
}

/// A single RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::RejectedInput(format!(
                "image buffer holds {} bytes, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_video(&self) -> Video {
        Video {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

/// A clip of RGB8 frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Video {
    pub fn from_raw(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::RejectedInput(format!(
                "video buffer holds {} bytes, expected {frames}x{height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::RejectedInput("empty frame list".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * 3);
        for f in frames {
            if f.height != h || f.width != w {
                return Err(Error::RejectedInput("frames differ in size".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Self::from_raw(frames.len(), h, w, data)
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.frame_bytes(t).to_vec(),
        }
    }

    /// Frames `[start, start + len)` as a new video.
    pub fn slice(&self, start: usize, len: usize) -> Result<Video> {
        if start + len > self.frames {
            return Err(Error::RejectedInput(format!(
                "slice {start}..{} out of {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(Video {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    pub fn concat(parts: &[Video]) -> Result<Video> {
        let first = parts
            .first()
            .ok_or_else(|| Error::RejectedInput("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::RejectedInput("videos differ in size".into()));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Video::from_raw(frames, first.height, first.width, data)
    }

    /// `(T, 3, H, W)` f32 tensor in `[-1, 1]`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let (t, h, w) = (self.frames, self.height, self.width);
        let mut planar = vec![0f32; t * 3 * h * w];
        for f in 0..t {
            let src = self.frame_bytes(f);
            for c in 0..3 {
                let dst = &mut planar[(f * 3 + c) * h * w..(f * 3 + c + 1) * h * w];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = byte_to_unit(src[p * 3 + c]);
                }
            }
        }
        Ok(Tensor::from_vec(planar, (t, 3, h, w), device)?)
    }

    /// Inverse of [`Video::to_tensor`]; values are clamped to `[-1, 1]` and
    /// quantized to 8 bits.
    pub fn from_tensor(x: &Tensor) -> Result<Video> {
        let (t, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::RejectedInput(format!("expected 3 channels, got {c}")));
        }
        let planar = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut data = vec![0u8; t * h * w * 3];
        for f in 0..t {
            for ch in 0..3 {
                let src = &planar[(f * 3 + ch) * h * w..(f * 3 + ch + 1) * h * w];
                for (p, v) in src.iter().enumerate() {
                    data[(f * h * w + p) * 3 + ch] = unit_to_byte(*v);
                }
            }
        }
        Video::from_raw(t, h, w, data)
    }

    pub fn reversed(&self) -> Video {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.frames).rev() {
            data.extend_from_slice(self.frame_bytes(t));
        }
        Video {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

impl Image {
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        self.as_video().to_tensor(device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_unit_roundtrip_is_exact_for_all_bytes() {
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let mut v = Video::from_raw(2, 3, 4, vec![0; 2 * 3 * 4 * 3]).unwrap();
        for (i, b) in v.data.iter_mut().enumerate() {
            *b = (i * 7 % 256) as u8;
        }
        let t = v.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 4]);
        assert_eq!(Video::from_tensor(&t).unwrap(), v);
    }

    #[test]
    fn slice_and_reverse() {
        let v = Video::from_raw(3, 1, 1, vec![1, 1, 1, 2, 2, 2, 3, 3, 3]).unwrap();
        assert_eq!(v.slice(1, 2).unwrap().data, vec![2, 2, 2, 3, 3, 3]);
        assert_eq!(v.reversed().data, vec![3, 3, 3, 2, 2, 2, 1, 1, 1]);
        assert!(v.slice(2, 2).is_err());
    }
}
