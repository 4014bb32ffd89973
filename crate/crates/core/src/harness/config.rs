//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default;
//! unknown keys and repeated keys are errors.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::env::{TaskKind, TaskSpec};
use crate::head::HeadConfig;
use crate::policy::PolicyConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub head_layers: usize,
    pub d_k: usize,
    pub head_heads: usize,
    pub horizon: usize,
    pub retrieve_r: usize,
    pub capacity: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Cosine decay length of the learning rate; 0 keeps it constant.
    pub lr_decay_steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub n_traj: usize,
    pub tasks: Vec<TaskKind>,
    pub eval_episodes: usize,
    pub exec_horizon: usize,
    pub enable_mol: bool,
    pub enable_msm: bool,
    pub unfreeze_backbone: bool,
    pub log_wallclock: bool,
    pub seed_data: u64,
    pub seed_model: u64,
    pub seed_train: u64,
    pub seed_eval: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            n_queries: 8,
            vocab_size: 64,
            head_layers: 4,
            d_k: 64,
            head_heads: 4,
            horizon: 8,
            retrieve_r: 4,
            capacity: 2048,
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_steps: 0,
            log_every: 50,
            checkpoint_every: 500,
            eval_every: 0,
            n_traj: 50,
            tasks: vec![TaskKind::PickPlace],
            eval_episodes: 100,
            exec_horizon: 8,
            enable_mol: true,
            enable_msm: true,
            unfreeze_backbone: false,
            log_wallclock: false,
            seed_data: 1,
            seed_model: 2,
            seed_train: 3,
            seed_eval: 4,
            dataset: PathBuf::from("dataset.jsonl"),
            checkpoint: PathBuf::from("checkpoint.bin"),
            metrics: PathBuf::from("metrics.csv"),
        }
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

macro_rules! fields {
    ($m:ident) => {
        $m!(n_layers, num);
        $m!(d_model, num);
        $m!(n_heads, num);
        $m!(n_queries, num);
        $m!(vocab_size, num);
        $m!(head_layers, num);
        $m!(d_k, num);
        $m!(head_heads, num);
        $m!(horizon, num);
        $m!(retrieve_r, num);
        $m!(capacity, num);
        $m!(steps, num);
        $m!(batch, num);
        $m!(lr, num);
        $m!(beta1, num);
        $m!(beta2, num);
        $m!(adam_eps, num);
        $m!(lr_decay_steps, num);
        $m!(log_every, num);
        $m!(checkpoint_every, num);
        $m!(eval_every, num);
        $m!(n_traj, num);
        $m!(tasks, tasks);
        $m!(eval_episodes, num);
        $m!(exec_horizon, num);
        $m!(enable_mol, bool);
        $m!(enable_msm, bool);
        $m!(unfreeze_backbone, bool);
        $m!(log_wallclock, bool);
        $m!(seed_data, num);
        $m!(seed_model, num);
        $m!(seed_train, num);
        $m!(seed_eval, num);
        $m!(dataset, path);
        $m!(checkpoint, path);
        $m!(metrics, path);
    };
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! push {
            ($f:ident, $kind:ident) => {
                out.push(stringify!($f));
            };
        }
        fields!(push);
        out
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Value { key: key.to_string(), msg };
        macro_rules! assign {
            ($f:ident, num) => {
                if key == stringify!($f) {
                    self.$f = parse_num(value).map_err(err)?;
                    return Ok(());
                }
            };
            ($f:ident, bool) => {
                if key == stringify!($f) {
                    self.$f = parse_bool(value).map_err(err)?;
                    return Ok(());
                }
            };
            ($f:ident, path) => {
                if key == stringify!($f) {
                    self.$f = PathBuf::from(value);
                    return Ok(());
                }
            };
            ($f:ident, tasks) => {
                if key == stringify!($f) {
                    self.$f = value
                        .split(',')
                        .map(|s| TaskKind::parse(s.trim()).ok_or_else(|| err(format!("unknown task `{}`", s.trim()))))
                        .collect::<Result<_, _>>()?;
                    return Ok(());
                }
            };
        }
        fields!(assign);
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Value { key: "--config".into(), msg: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    /// Canonical text form: every key, in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($f:ident, num) => {
                out.push_str(&format!("{} = {:?}\n", stringify!($f), self.$f));
            };
            ($f:ident, bool) => {
                out.push_str(&format!("{} = {}\n", stringify!($f), self.$f));
            };
            ($f:ident, path) => {
                out.push_str(&format!("{} = {}\n", stringify!($f), self.$f.display()));
            };
            ($f:ident, tasks) => {
                let names: Vec<&str> = self.$f.iter().map(|t| t.as_str()).collect();
                out.push_str(&format!("{} = {}\n", stringify!($f), names.join(",")));
            };
        }
        fields!(emit);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("batch, log_every and checkpoint_every must be positive");
        }
        if self.tasks.is_empty() || self.n_traj == 0 {
            return bad("need at least one task and one trajectory");
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.horizon {
            return bad("exec_horizon must be in 1..=horizon");
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        self.policy().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Learning rate for optimizer step `step` (1-based): cosine from `lr`
    /// down to `lr / 20` over `lr_decay_steps`, then flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.lr_decay_steps == 0 {
            return self.lr;
        }
        let floor = self.lr / 20.0;
        let frac = (step.saturating_sub(1)).min(self.lr_decay_steps) as f64 / self.lr_decay_steps as f64;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            backbone: BackboneConfig {
                n_layers: self.n_layers,
                d_model: self.d_model,
                n_heads: self.n_heads,
                n_queries: self.n_queries,
                vocab_size: self.vocab_size,
                seed: self.seed_model,
            },
            head: HeadConfig { n_layers: self.head_layers, d_k: self.d_k, n_heads: self.head_heads, horizon: self.horizon, d_a: 3, d_p: 3 },
            retrieve_r: self.retrieve_r,
            capacity: self.capacity,
            enable_mol: self.enable_mol,
            enable_msm: self.enable_msm,
        }
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|k| TaskSpec::standard(*k)).collect()
    }

    /// Resolves relative paths against `dir`.
    pub fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.dataset, &mut self.checkpoint, &mut self.metrics] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
