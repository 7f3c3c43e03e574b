//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::alleviator::{AlleviatorConfig, ShrinkOptions};
use crate::ndf::{ForestConfig, PruningMode};
use crate::rng::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{}unknown key `{key}`", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    UnknownKey { line: Option<usize>, key: String },
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err("expected adam or sgd".into()),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Merger weight on the base predictor.
    pub q: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Sessions per evaluation batch. Shrinkage statistics are taken over
    /// each evaluation batch, so this affects evaluation results.
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Root seed. Initialisation, shuffling, pruning masks and the forest's
    /// feature subsets each draw from their own derived stream.
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub alleviator: bool,
    pub positive_part: bool,
    /// Item embedding width `n`.
    pub embedding_dim: usize,
    /// Latent width `n'`.
    pub latent_dim: usize,
    /// When off the model is the base predictor alone.
    pub use_forest: bool,
    /// Stops the loss gradient from reaching the forest.
    pub detach_forest: bool,
    /// Train on every prefix of each training session.
    pub augment: bool,
    pub trees: usize,
    pub depth: usize,
    pub pruning_rate: f64,
    pub keep_fraction: f64,
    pub pruning: PruningMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let forest = ForestConfig::default();
        Self {
            q: 0.5,
            learning_rate: 1e-3,
            batch_size: 100,
            eval_batch_size: 100,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            alleviator: true,
            positive_part: false,
            embedding_dim: 32,
            latent_dim: 32,
            use_forest: true,
            detach_forest: false,
            augment: true,
            trees: forest.trees,
            depth: forest.depth,
            pruning_rate: forest.pruning_rate,
            keep_fraction: forest.keep_fraction,
            pruning: forest.pruning,
        }
    }
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

fn show(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

pub const KEYS: &[&str] = &[
    "q",
    "learning_rate",
    "batch_size",
    "eval_batch_size",
    "epochs",
    "seed",
    "optimizer",
    "alleviator",
    "positive_part",
    "embedding_dim",
    "latent_dim",
    "forest",
    "detach_forest",
    "augment",
    "trees",
    "depth",
    "pruning_rate",
    "keep_fraction",
    "pruning",
];

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let r = match key {
            "q" => num(value).map(|v| self.q = v),
            "learning_rate" => num(value).map(|v| self.learning_rate = v),
            "batch_size" => num(value).map(|v| self.batch_size = v),
            "eval_batch_size" => num(value).map(|v| self.eval_batch_size = v),
            "epochs" => num(value).map(|v| self.epochs = v),
            "seed" => num(value).map(|v| self.seed = v),
            "optimizer" => value.parse().map(|v| self.optimizer = v),
            "alleviator" => on_off(value).map(|v| self.alleviator = v),
            "positive_part" => on_off(value).map(|v| self.positive_part = v),
            "embedding_dim" => num(value).map(|v| self.embedding_dim = v),
            "latent_dim" => num(value).map(|v| self.latent_dim = v),
            "forest" => on_off(value).map(|v| self.use_forest = v),
            "detach_forest" => on_off(value).map(|v| self.detach_forest = v),
            "augment" => on_off(value).map(|v| self.augment = v),
            "trees" => num(value).map(|v| self.trees = v),
            "depth" => num(value).map(|v| self.depth = v),
            "pruning_rate" => num(value).map(|v| self.pruning_rate = v),
            "keep_fraction" => num(value).map(|v| self.keep_fraction = v),
            "pruning" => value.parse().map(|v| self.pruning = v),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: None,
                    key: key.into(),
                })
            }
        };
        r.map_err(|reason| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(o.into()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey {
                    line: Some(i + 1),
                    key,
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Every key in a fixed order. `parse(to_text())` restores the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("q", self.q.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eval_batch_size", self.eval_batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("alleviator", show(self.alleviator).into());
        kv("positive_part", show(self.positive_part).into());
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("forest", show(self.use_forest).into());
        kv("detach_forest", show(self.detach_forest).into());
        kv("augment", show(self.augment).into());
        kv("trees", self.trees.to_string());
        kv("depth", self.depth.to_string());
        kv("pruning_rate", self.pruning_rate.to_string());
        kv("keep_fraction", self.keep_fraction.to_string());
        kv("pruning", self.pruning.to_string());
        out
    }

    pub fn forest(&self) -> ForestConfig {
        ForestConfig {
            trees: self.trees,
            depth: self.depth,
            pruning_rate: self.pruning_rate,
            keep_fraction: self.keep_fraction,
            pruning: self.pruning,
            seed: derive_seed(self.seed, "forest"),
        }
    }

    pub fn alleviator_config(&self) -> AlleviatorConfig {
        AlleviatorConfig {
            enabled: self.alleviator,
            normalize: true,
            shrink: ShrinkOptions {
                positive_part: self.positive_part,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.q) {
            return bad(format!("q = {} outside [0, 1]", self.q));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return bad("batch sizes and epochs must be positive".into());
        }
        if self.alleviator && self.batch_size < 3 {
            return bad(format!(
                "batch size {} too small for shrinkage (needs >= 3)",
                self.batch_size
            ));
        }
        if self.embedding_dim == 0 || self.latent_dim == 0 {
            return bad("embedding and latent widths must be positive".into());
        }
        if self.use_forest {
            self.forest().validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(&["q=0.3", "pruning = literal-zero", "learning_rate=0.1"])
            .unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_written() {
        let text = TrainConfig::default().to_text();
        for k in KEYS {
            assert!(text.contains(&format!("\n{k} = ")) || text.starts_with(&format!("{k} = ")));
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = TrainConfig::parse("# c\nq = 0.2\nlr = 3\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: Some(3),
                key: "lr".into()
            }
        );
    }

    #[test]
    fn small_batch_with_shrinkage_rejected() {
        let mut cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.alleviator = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn q_outside_unit_interval_rejected() {
        let cfg = TrainConfig {
            q: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
