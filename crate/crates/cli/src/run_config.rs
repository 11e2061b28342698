//! Flat run configuration: training and model keys, plus `sim.`-prefixed
//! simulator keys. Later layers override earlier ones: defaults, the
//! config file, `--set` pairs, then dedicated flags.

use std::path::Path;

use anyhow::{Context, Result};
use gite_core::config::{parse_lines, KeyValue};
use gite_core::data::SimConfig;
use gite_core::train::TrainConfig;

pub const SIM_PREFIX: &str = "sim.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> gite_core::Result<()> {
        match key.strip_prefix(SIM_PREFIX) {
            Some(k) => self.sim.set(k, value),
            None => self.train.set(key, value),
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let label = path.display().to_string();
        for (line, key, value) in parse_lines(&text, &label)? {
            self.set(&key, &value)
                .with_context(|| format!("{label}:{line}"))?;
        }
        Ok(())
    }

    /// Applies `key=value` strings.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got {p:?}"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.train.entries();
        out.extend(
            self.sim
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("{SIM_PREFIX}{k}"), v)),
        );
        out
    }
}
