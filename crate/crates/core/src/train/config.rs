use crate::error::{Error, Result};
use crate::mesh::{FeatureConfig, TargetMode};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub total_steps: u64,
    /// First step of the geometric decay from `lr_max` to `lr_min`.
    pub decay_start: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// K-hop shortcut radius; `None` picks 2 above 20% masking, else 1.
    pub k_hop: Option<usize>,
    /// Per-field noise std; `None` uses the dataset default.
    pub noise_sigma: Option<Vec<f64>>,
    pub noise_pretrain: bool,
    pub noise_finetune: bool,
    pub seed: u64,
    /// Pretraining target. Finetuning always predicts the next step.
    pub task: TargetMode,
    pub datasets: Vec<String>,
    pub features: FeatureConfig,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            total_steps: 5000,
            decay_start: 2500,
            lr_max: 1e-4,
            lr_min: 1e-6,
            batch_size: 1,
            mask_ratio: 0.4,
            k_hop: None,
            noise_sigma: None,
            noise_pretrain: true,
            noise_finetune: true,
            seed: 0,
            task: TargetMode::NextStep,
            datasets: Vec::new(),
            features: FeatureConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_start > self.total_steps {
            return Err(Error::Config(format!(
                "decay_start {} exceeds total_steps {}",
                self.decay_start, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} not in [0, 1)", self.mask_ratio)));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config("need 0 < lr_min <= lr_max".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(s) = &self.noise_sigma {
            if s.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config("noise_sigma entries must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn noise_enabled(&self) -> bool {
        match self.phase {
            Phase::Pretrain => self.noise_pretrain,
            Phase::Finetune => self.noise_finetune,
        }
    }

    pub fn k(&self) -> usize {
        self.k_hop.unwrap_or_else(|| crate::masking::default_k(self.mask_ratio))
    }
}

/// The run configuration file: `[model]` and `[train]` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Learning rate at `step`: `lr_max` before `decay_start`, then geometric
/// interpolation reaching `lr_min` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.decay_start {
        return cfg.lr_max;
    }
    let span = cfg.total_steps.saturating_sub(cfg.decay_start);
    if span == 0 {
        return cfg.lr_min;
    }
    let frac = (step.min(cfg.total_steps) - cfg.decay_start) as f64 / span as f64;
    cfg.lr_max * (cfg.lr_min / cfg.lr_max).powf(frac)
}
