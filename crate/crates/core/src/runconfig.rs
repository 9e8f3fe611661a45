//! Plain-text `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Directory with `partial/` and `complete/` subtrees.
    pub shapes_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 2e-4,
            weight_decay: 1e-4,
            steps: 500,
            batch_size: 1,
            shapes_dir: None,
            checkpoint: None,
            loss_csv: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

impl RunConfig {
    /// Settings for the reduced configuration used by toy training.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            lr: 3e-3,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "shapes_dir" => self.shapes_dir = path(),
            "checkpoint" => self.checkpoint = path(),
            "loss_csv" => self.loss_csv = path(),
            k if ModelConfig::is_key(k) => self.model.set(k, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file body. A `preset` line, wherever it appears,
    /// selects the model starting point before other keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                cfg = if v == "toy" {
                    Self::toy()
                } else {
                    Self {
                        model: ModelConfig::preset(v)?,
                        ..Self::default()
                    }
                };
            } else {
                entries.push((i + 1, k, v));
            }
        }
        for (line, k, v) in entries {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("invalid configuration: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.model.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        writeln!(f, "shapes_dir = {}", p(&self.shapes_dir))?;
        writeln!(f, "checkpoint = {}", p(&self.checkpoint))?;
        writeln!(f, "loss_csv = {}", p(&self.loss_csv))
    }
}
