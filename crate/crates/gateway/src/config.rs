//! TOML configuration.
//!
//! Every key is optional. `scale` picks a preset (`ci` or `desk`) for the
//! `[experiment]` table and any keys given there override the preset, at any
//! depth. Command-line `--set a.b.c=value` overrides are applied last, with
//! `value` parsed as a TOML value (falling back to a bare string).
//!
//! ```toml
//! scale = "ci"
//! seed = 1
//! data_dir = "data"
//! checkpoint_dir = "checkpoints"
//! metrics_log = "metrics.jsonl"
//!
//! [serve]
//! bind = "127.0.0.1:7878"
//! window = 8
//!
//! [experiment.refine]
//! steps = 600
//! lambda_r1 = 100.0
//! ```
//!
//! `interplay config` prints the fully resolved file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use interplay_core::experiment::{ExperimentConfig, Scale};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub bind: String,
    /// KV cache window in latent frames; unbounded when absent.
    pub window: Option<usize>,
    pub max_frames: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            window: Some(8),
            max_frames: Some(256),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub scale: Scale,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_log: Option<PathBuf>,
    pub serve: ServeConfig,
    pub experiment: ExperimentConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(assignment: &str) -> anyhow::Result<Table> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not key=value");
    };
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key");
    }
    let last = keys.pop().unwrap_or_default();
    let mut table = Table::from_iter([(last.to_string(), value)]);
    while let Some(k) = keys.pop() {
        table = Table::from_iter([(k.to_string(), Value::Table(table))]);
    }
    Ok(table)
}

impl Config {
    /// Resolves a config from an optional file and `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            merge(&mut user, parse_override(o)?);
        }
        let scale: Scale = match user.get("scale") {
            Some(v) => v.clone().try_into().context("scale must be \"ci\" or \"desk\"")?,
            None => Scale::Ci,
        };
        let seed = match user.get("seed") {
            Some(v) => v.as_integer().filter(|s| *s >= 0).context("seed must be a non-negative integer")? as u64,
            None => 1,
        };
        let defaults = Config {
            scale,
            seed,
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            metrics_log: None,
            serve: ServeConfig::default(),
            experiment: ExperimentConfig::for_scale(scale, seed),
        };
        let mut table = Table::try_from(&defaults).context("serializing defaults")?;
        merge(&mut table, user);
        let cfg: Config = table.try_into().context("invalid configuration")?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::load(None, &[]).unwrap();
        assert_eq!(cfg.scale, Scale::Ci);
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert_eq!(Config::load(Some(&p), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = Config::load(None, &["experiment.refine.steps=12".into(), "serve.bind=0.0.0.0:1".into()]).unwrap();
        assert_eq!(cfg.experiment.refine.steps, 12);
        assert_eq!(cfg.serve.bind, "0.0.0.0:1");
        assert!(Config::load(None, &["experiment.refine.steps".into()]).is_err());
    }
}
