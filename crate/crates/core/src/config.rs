//! Flat `key = value` experiment configuration with dotted section prefixes.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default, unknown or repeated keys are errors, and [`ExperimentConfig::to_text`]
//! writes every key so a saved config reproduces a run exactly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gasl::GaslConfig;
use crate::nn::{Arch, DenseGrouping, GroupingMode};
use crate::optim::TrainConfig;
use crate::prune::PruneConfig;
use crate::regularizers::ObjectiveConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub arch: Arch,
    /// Overrides the architecture's dense-layer grouping when set.
    pub dense_grouping: Option<DenseGrouping>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Trailing training images held out for validation.
    pub val_size: usize,
    /// Use only the first `n` training images (after the hold-out); 0 means all.
    pub train_limit: usize,
    /// Evaluate on only the first `n` test images; 0 means all.
    pub test_limit: usize,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub gasl: GaslConfig,
    pub prune: PruneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: Arch::Mlp,
            dense_grouping: None,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            val_size: 5000,
            train_limit: 0,
            test_limit: 0,
            train: TrainConfig::default(),
            objective: ObjectiveConfig::default(),
            gasl: GaslConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got `{value}`"))),
    }
}

fn switch(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

/// Every recognised key, in serialisation order.
pub const KEYS: &[&str] = &[
    "arch",
    "model.dense_grouping",
    "data.dir",
    "data.val_size",
    "data.train_limit",
    "data.test_limit",
    "out_dir",
    "train.lr0",
    "train.zeta",
    "train.batch_size",
    "train.max_epochs",
    "train.plateau_patience",
    "train.early_stop_patience",
    "train.lr_drop_factor",
    "train.seed",
    "train.gasl_log_every",
    "objective.lambda_s",
    "objective.alpha",
    "objective.lambda_l2",
    "objective.grouping",
    "objective.attention",
    "objective.variance_epsilon",
    "gasl.enabled",
    "gasl.mu",
    "gasl.sigma",
    "gasl.target",
    "gasl.mixing_matrix",
    "gasl.application",
    "gasl.zero_norm_epsilon",
    "prune.tau",
    "prune.mode",
];

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "arch" => self.arch = v.parse()?,
            "model.dense_grouping" => {
                self.dense_grouping = if v == "auto" { None } else { Some(v.parse()?) };
            }
            "data.dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.val_size" => self.val_size = parse(key, v)?,
            "data.train_limit" => self.train_limit = parse(key, v)?,
            "data.test_limit" => self.test_limit = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train.lr0" => self.train.lr0 = parse(key, v)?,
            "train.zeta" => self.train.zeta = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.gasl_log_every" => self.train.gasl_log_every = parse(key, v)?,
            "objective.lambda_s" => self.objective.lambda_s = parse(key, v)?,
            "objective.alpha" => self.objective.alpha = parse(key, v)?,
            "objective.lambda_l2" => self.objective.lambda_l2 = parse(key, v)?,
            "objective.grouping" => self.objective.grouping_mode = v.parse()?,
            "objective.attention" => self.objective.attention = parse_switch(key, v)?,
            "objective.variance_epsilon" => self.objective.variance_epsilon = parse(key, v)?,
            "gasl.enabled" => self.gasl.enabled = parse_switch(key, v)?,
            "gasl.mu" => self.gasl.mu = parse(key, v)?,
            "gasl.sigma" => self.gasl.sigma = parse(key, v)?,
            "gasl.target" => self.gasl.target = v.parse()?,
            "gasl.mixing_matrix" => self.gasl.mixing_matrix = v.parse()?,
            "gasl.application" => self.gasl.application = v.parse()?,
            "gasl.zero_norm_epsilon" => self.gasl.zero_norm_epsilon = parse(key, v)?,
            "prune.tau" => self.prune.tau = parse(key, v)?,
            "prune.mode" => self.prune.mode = v.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "arch" => self.arch.to_string(),
            "model.dense_grouping" => self.dense_grouping.map_or("auto".to_string(), |g| g.to_string()),
            "data.dir" => self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "data.val_size" => self.val_size.to_string(),
            "data.train_limit" => self.train_limit.to_string(),
            "data.test_limit" => self.test_limit.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "train.lr0" => self.train.lr0.to_string(),
            "train.zeta" => self.train.zeta.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.plateau_patience" => self.train.plateau_patience.to_string(),
            "train.early_stop_patience" => self.train.early_stop_patience.to_string(),
            "train.lr_drop_factor" => self.train.lr_drop_factor.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.gasl_log_every" => self.train.gasl_log_every.to_string(),
            "objective.lambda_s" => self.objective.lambda_s.to_string(),
            "objective.alpha" => self.objective.alpha.to_string(),
            "objective.lambda_l2" => self.objective.lambda_l2.to_string(),
            "objective.grouping" => self.objective.grouping_mode.to_string(),
            "objective.attention" => switch(self.objective.attention),
            "objective.variance_epsilon" => self.objective.variance_epsilon.to_string(),
            "gasl.enabled" => switch(self.gasl.enabled),
            "gasl.mu" => self.gasl.mu.to_string(),
            "gasl.sigma" => self.gasl.sigma.to_string(),
            "gasl.target" => self.gasl.target.to_string(),
            "gasl.mixing_matrix" => self.gasl.mixing_matrix.to_string(),
            "gasl.application" => self.gasl.application.to_string(),
            "gasl.zero_norm_epsilon" => self.gasl.zero_norm_epsilon.to_string(),
            "prune.tau" => self.prune.tau.to_string(),
            "prune.mode" => self.prune.mode.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` set twice", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Checks value ranges and that a configured data directory exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.objective.validate()?;
        self.gasl.validate()?;
        self.prune.validate()?;
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data.dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    /// Grouping used for the penalties and for pruning.
    pub fn grouping(&self) -> GroupingMode {
        self.objective.grouping_mode
    }
}
