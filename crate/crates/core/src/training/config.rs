use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Cosine,
    None,
}

impl FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Decay::Cosine),
            "none" => Ok(Decay::None),
            other => Err(Error::Config(format!("decay must be cosine|none, got `{other}`"))),
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decay::Cosine => "cosine",
            Decay::None => "none",
        })
    }
}

/// Outer/inner loop hyperparameters shared by all trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Task (inner loop) learning rate.
    pub alpha: f64,
    /// Global (outer loop) learning rate; base step size of the outer optimizer.
    pub beta: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
    /// Dropout rate applied to hidden layers during training forward passes.
    pub dropout: f64,
    pub workers: usize,
    pub seed: u64,
    /// LiMAML: feed the adapted meta blocks into the query pass that
    /// produces the global-block gradient. When false the un-adapted meta
    /// block is used instead.
    pub global_uses_adapted_meta: bool,
    /// LiMAML: keep the meta block fixed in the outer loop.
    pub freeze_meta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.0012,
            inner_steps: 1,
            tasks_per_batch: 128,
            clip_norm: Some(1.0),
            warmup_steps: 50,
            total_steps: 1000,
            decay: Decay::Cosine,
            dropout: 0.0,
            workers: 1,
            seed: 0,
            global_uses_adapted_meta: true,
            freeze_meta: false,
        }
    }
}

/// Keys accepted in a training configuration file, in file order.
pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "inner_steps",
    "tasks_per_batch",
    "clip_norm",
    "warmup_steps",
    "total_steps",
    "decay",
    "dropout",
    "workers",
    "seed",
    "global_uses_adapted_meta",
    "freeze_meta",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::Config("tasks_per_batch must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds a config from `key = value` pairs; every key in
    /// [`TRAIN_CONFIG_KEYS`] must be present.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in TRAIN_CONFIG_KEYS {
            if !map.contains_key(*key) {
                return Err(Error::MissingKey((*key).to_string()));
            }
        }
        let mut cfg = Self::default();
        for (k, v) in map {
            if TRAIN_CONFIG_KEYS.contains(&k.as_str()) {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "inner_steps" => self.inner_steps = parse(key, value)?,
            "tasks_per_batch" => self.tasks_per_batch = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "decay" => self.decay = value.trim().parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "global_uses_adapted_meta" => self.global_uses_adapted_meta = parse(key, value)?,
            "freeze_meta" => self.freeze_meta = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Renders the config in the `key = value` file format.
    pub fn to_key_values(&self) -> String {
        let clip = self
            .clip_norm
            .map_or_else(|| "none".to_string(), |c| c.to_string());
        format!(
            "alpha = {}\nbeta = {}\ninner_steps = {}\ntasks_per_batch = {}\nclip_norm = {}\nwarmup_steps = {}\ntotal_steps = {}\ndecay = {}\ndropout = {}\nworkers = {}\nseed = {}\nglobal_uses_adapted_meta = {}\nfreeze_meta = {}\n",
            self.alpha,
            self.beta,
            self.inner_steps,
            self.tasks_per_batch,
            clip,
            self.warmup_steps,
            self.total_steps,
            self.decay,
            self.dropout,
            self.workers,
            self.seed,
            self.global_uses_adapted_meta,
            self.freeze_meta
        )
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "config".into(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                path: "config".into(),
                line: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}
