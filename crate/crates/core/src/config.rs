//! Flat `key = value` configuration text, shared by config files, run
//! manifests and checkpoint headers.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::SimConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// A configuration that can be echoed and overridden key by key.
pub trait KeyValue {
    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(String, String)>;

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    fn apply_text(&mut self, text: &str, label: &str) -> Result<()> {
        for (line, key, value) in parse_lines(text, label)? {
            self.set(&key, &value).map_err(|e| Error::Ingest {
                path: label.to_string(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `(line, key, value)` triples of a flat config text.
pub fn parse_lines(text: &str, label: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Ingest {
            path: label.to_string(),
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}"))
}

impl KeyValue for ModelConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("variant", self.variant),
            kv("hidden", self.hidden),
            kv("layers", self.layers),
            kv("attention", self.attention),
            kv("pi_eta", self.pi_eta),
            kv("beta", self.beta),
            kv("lambda", self.lambda),
            kv("lambda_d", self.lambda_d),
            kv("lambda_p", self.lambda_p),
            kv("dropout", self.dropout),
            kv("xi", self.sinkhorn.xi),
            kv("sinkhorn_max_iter", self.sinkhorn.max_iter),
            kv("sinkhorn_tol", self.sinkhorn.tol),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "attention" => self.attention = value.parse()?,
            "pi_eta" => self.pi_eta = value.parse()?,
            "beta" => self.beta = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "lambda_d" => self.lambda_d = parse_value(key, value)?,
            "lambda_p" => self.lambda_p = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "xi" => self.sinkhorn.xi = parse_value(key, value)?,
            "sinkhorn_max_iter" => self.sinkhorn.max_iter = parse_value(key, value)?,
            "sinkhorn_tol" => self.sinkhorn.tol = parse_value(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

impl KeyValue for TrainConfig {
    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            kv("seed", self.seed),
            kv("learning_rate", self.learning_rate),
            kv("weight_decay", self.weight_decay),
            kv("max_iterations", self.max_iterations),
            kv("validate_every", self.validate_every),
            kv("patience", self.patience),
        ];
        out.extend(self.model.entries());
        out
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "max_iterations" => self.max_iterations = parse_value(key, value)?,
            "validate_every" => self.validate_every = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            _ => return self.model.set(key, value),
        }
        Ok(())
    }
}

impl KeyValue for SimConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("n", self.n),
            kv("covariates", self.covariates),
            kv("graph", self.graph),
            kv("weight_law", self.weight_law),
            kv("noise_std", self.noise_std),
            kv("standardize_agg", self.standardize_agg),
            kv("resample_edge_weights", self.resample_edge_weights),
            kv("effect_scale", self.effect_scale),
            kv("seed", self.seed),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n" => self.n = parse_value(key, value)?,
            "covariates" => self.covariates = parse_value(key, value)?,
            "graph" => self.graph = value.parse()?,
            "weight_law" => self.weight_law = value.parse()?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "standardize_agg" => self.standardize_agg = parse_value(key, value)?,
            "resample_edge_weights" => self.resample_edge_weights = parse_value(key, value)?,
            "effect_scale" => self.effect_scale = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}
