//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use langfold::eval::DEFAULT_HORIZON;
use langfold::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    Value { line: usize, key: String, value: String, reason: String },
}

/// Every setting a subcommand may read. Flags override the file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub demos_per_task: usize,
    pub lr: f32,
    pub batch: usize,
    pub edge_epochs: usize,
    pub policy_epochs: usize,
    pub success_epochs: usize,
    pub holdout_every: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub classifier_gated: bool,
    pub data: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

/// Keys with their defaults, as listed by `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "available cores"),
    ("demos_per_task", "100"),
    ("lr", "0.0003"),
    ("batch", "16"),
    ("edge_epochs", "20"),
    ("policy_epochs", "100"),
    ("success_epochs", "20"),
    ("holdout_every", "10"),
    ("episodes", "50"),
    ("horizon", "4"),
    ("classifier_gated", "true"),
    ("data", "unset"),
    ("edges", "unset"),
    ("policy", "unset"),
];

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            workers: available_cores(),
            demos_per_task: 100,
            lr: t.lr,
            batch: t.batch,
            edge_epochs: t.edge_epochs,
            policy_epochs: t.policy_epochs,
            success_epochs: t.success_epochs,
            holdout_every: t.holdout_every,
            episodes: 50,
            horizon: DEFAULT_HORIZON,
            classifier_gated: true,
            data: None,
            edges: None,
            policy: None,
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn positive(v: &str) -> Result<usize, String> {
    match parse::<usize>(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            self.set(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey { line, key: key.into() },
                SetError::Bad(reason) => ConfigError::Value { line, key: key.into(), value: value.into(), reason },
            })?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        match key {
            "seed" => self.seed = parse(v)?,
            "workers" => self.workers = positive(v)?,
            "demos_per_task" => self.demos_per_task = positive(v)?,
            "lr" => {
                let lr: f32 = parse(v)?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(SetError::Bad("must be a positive number".into()));
                }
                self.lr = lr;
            }
            "batch" => self.batch = positive(v)?,
            "edge_epochs" => self.edge_epochs = parse(v)?,
            "policy_epochs" => self.policy_epochs = parse(v)?,
            "success_epochs" => self.success_epochs = parse(v)?,
            "holdout_every" => {
                let n: usize = parse(v)?;
                if n < 2 {
                    return Err(SetError::Bad("must be at least 2".into()));
                }
                self.holdout_every = n;
            }
            "episodes" => self.episodes = positive(v)?,
            "horizon" => self.horizon = positive(v)?,
            "classifier_gated" => self.classifier_gated = parse(v)?,
            "data" => self.data = Some(v.into()),
            "edges" => self.edges = Some(v.into()),
            "policy" => self.policy = Some(v.into()),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            edge_epochs: self.edge_epochs,
            policy_epochs: self.policy_epochs,
            success_epochs: self.success_epochs,
            seed: self.seed,
            workers: self.workers,
            holdout_every: self.holdout_every,
        }
    }
}

enum SetError {
    Unknown,
    Bad(String),
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        SetError::Bad(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# run\nseed = 7  # trailing\n\nlr=0.001\nclassifier_gated = false\ndata = demos.ldom\n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 0.001);
        assert!(!cfg.classifier_gated);
        assert_eq!(cfg.data, Some(PathBuf::from("demos.ldom")));
        assert_eq!(cfg.batch, 16);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("seed = 1\nfoo = 3\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "foo".into() });
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        assert_eq!(RunConfig::default().apply_text("seed 3"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(RunConfig::default().apply_text("batch = 0"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::default().apply_text("lr = -1"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::default().apply_text("seed = x"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn every_key_is_settable() {
        for (key, _) in KEYS {
            let value = match *key {
                "classifier_gated" => "false",
                "lr" => "0.5",
                "data" | "edges" | "policy" => "x",
                _ => "3",
            };
            RunConfig::default().set(key, value).unwrap_or_else(|_| panic!("{key} rejected"));
        }
    }

    #[test]
    fn defaults_match_the_listed_ones() {
        let cfg = RunConfig::default();
        let listed = |k: &str| KEYS.iter().find(|(n, _)| *n == k).unwrap().1;
        assert_eq!(listed("seed"), cfg.seed.to_string());
        assert_eq!(listed("demos_per_task"), cfg.demos_per_task.to_string());
        assert_eq!(listed("lr").parse::<f32>().unwrap(), cfg.lr);
        assert_eq!(listed("batch"), cfg.batch.to_string());
        assert_eq!(listed("edge_epochs"), cfg.edge_epochs.to_string());
        assert_eq!(listed("policy_epochs"), cfg.policy_epochs.to_string());
        assert_eq!(listed("success_epochs"), cfg.success_epochs.to_string());
        assert_eq!(listed("holdout_every"), cfg.holdout_every.to_string());
        assert_eq!(listed("episodes"), cfg.episodes.to_string());
        assert_eq!(listed("horizon"), cfg.horizon.to_string());
        assert_eq!(listed("classifier_gated"), cfg.classifier_gated.to_string());
    }
}
