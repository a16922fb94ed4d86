//! Content-addressed checkpoint store.
//!
//! ```text
//! <root>/<id>/weights.safetensors
//! <root>/<id>/meta.json
//! <root>/index.jsonl            one line per saved checkpoint
//! ```
//!
//! The id is a prefix of the sha256 over the weight bytes followed by the
//! metadata bytes; loading recomputes it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::nn::NamedTensors;
use crate::{Error, Result};

const ID_LEN: usize = 16;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// `codec`, `generator`, `critic`, `discriminator` or `probe`.
    pub kind: String,
    pub stage: Option<String>,
    pub step: usize,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub codec_id: Option<String>,
    pub parent: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub curves: BTreeMap<String, Vec<(usize, f64)>>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        let config_hash = hex::encode(Sha256::digest(config.to_string().as_bytes()))[..ID_LEN].to_string();
        Self {
            version: FORMAT_VERSION,
            kind: kind.to_string(),
            stage: None,
            step: 0,
            config,
            config_hash,
            codec_id: None,
            parent: None,
            metrics: BTreeMap::new(),
            curves: BTreeMap::new(),
        }
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub kind: String,
    pub stage: Option<String>,
    pub step: usize,
    pub parent: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

fn content_id(weights: &[u8], meta: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(weights);
    h.update(meta);
    hex::encode(h.finalize())[..ID_LEN].to_string()
}

pub fn serialize_tensors(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let sorted: BTreeMap<&String, &candle_core::Tensor> = tensors.iter().collect();
    safetensors::serialize(sorted, None).map_err(|e| Error::Numerical(format!("safetensors: {e}")))
}

impl CheckpointStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).at(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self, meta: &CheckpointMeta, tensors: &NamedTensors) -> Result<String> {
        let weights = serialize_tensors(tensors)?;
        let meta_bytes = serde_json::to_vec_pretty(meta)?;
        let id = content_id(&weights, &meta_bytes);
        let dir = self.root.join(&id);
        fs::create_dir_all(&dir).at(&dir)?;
        let wp = dir.join("weights.safetensors");
        fs::write(&wp, &weights).at(&wp)?;
        let mp = dir.join("meta.json");
        fs::write(&mp, &meta_bytes).at(&mp)?;
        if !self.list()?.iter().any(|e| e.id == id) {
            let entry = IndexEntry {
                id: id.clone(),
                kind: meta.kind.clone(),
                stage: meta.stage.clone(),
                step: meta.step,
                parent: meta.parent.clone(),
            };
            let ip = self.root.join("index.jsonl");
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&ip).at(&ip)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).at(&ip)?;
        }
        Ok(id)
    }

    pub fn load_meta(&self, id: &str) -> Result<CheckpointMeta> {
        Ok(self.read_verified(id)?.0)
    }

    fn read_verified(&self, id: &str) -> Result<(CheckpointMeta, Vec<u8>)> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            id: id.to_string(),
            reason,
        };
        let dir = self.root.join(id);
        if !dir.is_dir() {
            return Err(Error::Config(format!("no checkpoint {id} under {}", self.root.display())));
        }
        let weights = fs::read(dir.join("weights.safetensors")).map_err(|e| corrupt(format!("weights: {e}")))?;
        let meta_bytes = fs::read(dir.join("meta.json")).map_err(|e| corrupt(format!("meta: {e}")))?;
        let actual = content_id(&weights, &meta_bytes);
        if actual != id {
            return Err(corrupt(format!("content hash {actual} does not match")));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(format!("meta: {e}")))?;
        if meta.version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", meta.version)));
        }
        Ok((meta, weights))
    }

    pub fn load(&self, id: &str, device: &Device) -> Result<(CheckpointMeta, NamedTensors)> {
        let (meta, weights) = self.read_verified(id)?;
        let tensors = candle_core::safetensors::load_buffer(&weights, device).map_err(|e| Error::CorruptCheckpoint {
            id: id.to_string(),
            reason: e.to_string(),
        })?;
        Ok((meta, tensors))
    }

    pub fn list(&self) -> Result<Vec<IndexEntry>> {
        let ip = self.root.join("index.jsonl");
        if !ip.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&ip).at(&ip)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Ancestors of `id`, oldest first, ending with `id` itself.
    pub fn lineage(&self, id: &str) -> Result<Vec<IndexEntry>> {
        let all = self.list()?;
        let mut chain = Vec::new();
        let mut cur = Some(id.to_string());
        while let Some(c) = cur {
            let e = all
                .iter()
                .find(|e| e.id == c)
                .ok_or_else(|| Error::Config(format!("checkpoint {c} not in index")))?;
            if chain.iter().any(|x: &IndexEntry| x.id == e.id) {
                return Err(Error::CorruptCheckpoint {
                    id: c,
                    reason: "lineage cycle".into(),
                });
            }
            chain.push(e.clone());
            cur = e.parent.clone();
        }
        chain.reverse();
        Ok(chain)
    }

    /// Resolves a unique id prefix.
    pub fn resolve(&self, prefix: &str) -> Result<String> {
        let hits: Vec<_> = self.list()?.into_iter().filter(|e| e.id.starts_with(prefix)).collect();
        match hits.as_slice() {
            [one] => Ok(one.id.clone()),
            [] => Err(Error::Config(format!("no checkpoint matches {prefix}"))),
            _ => Err(Error::Config(format!("checkpoint prefix {prefix} is ambiguous"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    fn tensors() -> NamedTensors {
        let mut t = NamedTensors::new();
        t.insert("a.weight".into(), Tensor::new(&[[1f32, 2.0], [3.0, 4.5]], &Device::Cpu).unwrap());
        t.insert("b.bias".into(), Tensor::new(&[0.25f32], &Device::Cpu).unwrap());
        t
    }

    #[test]
    fn save_load_roundtrip_and_lineage() {
        let tmp = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(tmp.path()).unwrap();
        let mut meta = CheckpointMeta::new("generator", serde_json::json!({"layers": 2}));
        meta.stage = Some("teacher".into());
        let a = store.save(&meta, &tensors()).unwrap();
        assert_eq!(store.save(&meta, &tensors()).unwrap(), a);
        meta.stage = Some("causal".into());
        meta.parent = Some(a.clone());
        let b = store.save(&meta, &tensors()).unwrap();
        meta.stage = Some("refine".into());
        meta.parent = Some(b.clone());
        let c = store.save(&meta, &tensors()).unwrap();
        let chain = store.lineage(&c).unwrap();
        assert_eq!(chain.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec![&a, &b, &c]);
        let (m, t) = store.load(&c, &Device::Cpu).unwrap();
        assert_eq!(m, meta);
        assert_eq!(t["a.weight"].to_vec2::<f32>().unwrap(), tensors()["a.weight"].to_vec2::<f32>().unwrap());
        assert_eq!(store.resolve(&c[..6]).unwrap(), c);
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(tmp.path()).unwrap();
        let id = store.save(&CheckpointMeta::new("probe", serde_json::json!({})), &tensors()).unwrap();
        let wp = tmp.path().join(&id).join("weights.safetensors");
        let mut bytes = fs::read(&wp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&wp, bytes).unwrap();
        assert!(matches!(store.load(&id, &Device::Cpu), Err(Error::CorruptCheckpoint { .. })));
    }
}
