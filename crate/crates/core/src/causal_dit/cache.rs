use candle_core::Tensor;

use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    frame: usize,
    k: Tensor,
    v: Tensor,
}

/// Per-layer, per-frame keys and values of committed frames.
///
/// Frames are appended in order, one layer at a time; a frame counts as
/// cached once every layer holds it. With an eviction window `W` only the
/// bootstrap frame and the `W` most recent frames are retained.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<Vec<Entry>>,
    frames_cached: usize,
    window: Option<usize>,
    capacity: Option<usize>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); layers],
            frames_cached: 0,
            window: None,
            capacity: None,
        }
    }

    pub fn with_window(mut self, window: Option<usize>) -> Self {
        self.window = window;
        self
    }

    /// Maximum number of frames held without eviction.
    pub fn with_capacity(mut self, capacity: Option<usize>) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames_cached(&self) -> usize {
        self.frames_cached
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn append(&mut self, layer: usize, frame: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        let n_layers = self.layers.len();
        let entries = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Config(format!("cache has {n_layers} layers, got layer {layer}")))?;
        let next = entries.last().map_or(self.frames_cached, |e| e.frame + 1);
        if frame < next {
            return Err(Error::Protocol(format!("frame {frame} already appended to layer {layer}")));
        }
        if frame != next {
            return Err(Error::Protocol(format!("frame {frame} appended out of order, expected {next}")));
        }
        if self.window.is_none() && self.capacity.is_some_and(|c| frame >= c) {
            return Err(Error::Resource(format!(
                "cache capacity of {} frames exhausted",
                self.capacity.unwrap_or(0)
            )));
        }
        entries.push(Entry {
            frame,
            k: k.detach(),
            v: v.detach(),
        });
        // a frame counts as cached once every layer holds it
        while self.layers.iter().all(|l| l.last().is_some_and(|e| e.frame >= self.frames_cached)) {
            let done = self.frames_cached;
            self.frames_cached += 1;
            if let Some(w) = self.window {
                let keep_from = done.saturating_sub(w) + 1;
                for l in &mut self.layers {
                    // keep the bootstrap frame plus the last `w`
                    l.retain(|e| e.frame == 0 || e.frame >= keep_from);
                }
            }
        }
        Ok(())
    }

    /// Concatenated keys and values of `layer` along the token axis.
    pub fn kv(&self, layer: usize) -> Result<Option<(Tensor, Tensor)>> {
        let entries = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("cache has {} layers, got layer {layer}", self.layers.len())))?;
        let committed: Vec<&Entry> = entries.iter().filter(|e| e.frame < self.frames_cached).collect();
        if committed.is_empty() {
            return Ok(None);
        }
        let ks: Vec<&Tensor> = committed.iter().map(|e| &e.k).collect();
        let vs: Vec<&Tensor> = committed.iter().map(|e| &e.v).collect();
        let axis = ks[0].rank() - 2;
        Ok(Some((Tensor::cat(&ks, axis)?, Tensor::cat(&vs, axis)?)))
    }

    pub fn frame_indices(&self, layer: usize) -> Vec<usize> {
        self.layers
            .get(layer)
            .map(|l| l.iter().map(|e| e.frame).collect())
            .unwrap_or_default()
    }

    /// Number of cached key tokens in `layer`.
    pub fn key_len(&self, layer: usize) -> usize {
        self.layers
            .get(layer)
            .map(|l| l.iter().map(|e| e.k.dims()[e.k.rank() - 2]).sum())
            .unwrap_or(0)
    }

    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|e| 4 * (e.k.elem_count() + e.v.elem_count()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn kv(n: usize) -> Tensor {
        Tensor::zeros((1, 2, n, 4), DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn nine_frames_linear_growth() {
        let mut c = KvCache::new(3);
        for f in 0..9 {
            for l in 0..3 {
                c.append(l, f, &kv(4), &kv(4)).unwrap();
            }
        }
        assert_eq!(c.frames_cached(), 9);
        for l in 0..3 {
            assert_eq!(c.key_len(l), 36);
            assert_eq!(c.kv(l).unwrap().unwrap().0.dims(), &[1, 2, 36, 4]);
        }
    }

    #[test]
    fn double_append_is_protocol_error() {
        let mut c = KvCache::new(2);
        c.append(0, 0, &kv(4), &kv(4)).unwrap();
        assert!(matches!(c.append(0, 0, &kv(4), &kv(4)), Err(Error::Protocol(_))));
        c.append(1, 0, &kv(4), &kv(4)).unwrap();
        assert!(matches!(c.append(1, 0, &kv(4), &kv(4)), Err(Error::Protocol(_))));
        assert!(matches!(c.append(0, 2, &kv(4), &kv(4)), Err(Error::Protocol(_))));
        assert!(matches!(c.append(5, 1, &kv(4), &kv(4)), Err(Error::Config(_))));
    }

    #[test]
    fn eviction_keeps_bootstrap_and_recent() {
        let mut c = KvCache::new(2).with_window(Some(16));
        for f in 0..20 {
            for l in 0..2 {
                c.append(l, f, &kv(4), &kv(4)).unwrap();
            }
        }
        let expected: Vec<usize> = std::iter::once(0).chain(4..20).collect();
        assert_eq!(c.frame_indices(0), expected);
        assert_eq!(c.frame_indices(1), expected);
        assert_eq!(c.frames_cached(), 20);
    }

    #[test]
    fn capacity_overflow_is_resource_error() {
        let mut c = KvCache::new(1).with_capacity(Some(2));
        c.append(0, 0, &kv(1), &kv(1)).unwrap();
        c.append(0, 1, &kv(1), &kv(1)).unwrap();
        assert!(matches!(c.append(0, 2, &kv(1), &kv(1)), Err(Error::Resource(_))));
    }
}
