//! Versioned TOML training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleToggles};
use crate::optim::AdamWConfig;
use crate::synth::PerturbConfig;
use crate::warmstart::WarmStartConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Loss terms that can be switched off independently of the modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub pixel: bool,
    pub patch: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            pixel: true,
            patch: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Dataset directory holding `train/` and `test/` splits.
    pub train: PathBuf,
    /// Dataset directories evaluated after training.
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub toggles: ModuleToggles,
    #[serde(default)]
    pub losses: LossToggles,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub warm_start: WarmStartConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 2024,
            batch_size: 16,
            epochs: 16,
            warmup_fraction: 0.1,
            optimizer: AdamWConfig::default(),
            toggles: ModuleToggles::default(),
            losses: LossToggles::default(),
            data: DataPaths::default(),
            perturb: PerturbConfig::default(),
            warm_start: WarmStartConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `desk` is the default. `guardian`, `usa` and `wash` carry the learning
    /// rate, batch size and epochs for large pretrained backbones per training
    /// source, and `general` the common setting.
    pub fn preset(name: &str) -> Result<Self> {
        let (lr, batch, epochs) = match name {
            "desk" => return Ok(Self::default()),
            "general" => (1.5e-5, 16, 10),
            "guardian" => (4.1e-5, 128, 12),
            "usa" => (1.1e-5, 16, 10),
            "wash" => (1e-5, 16, 10),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        let mut cfg = Self::default();
        cfg.optimizer.lr = lr;
        cfg.batch_size = batch;
        cfg.epochs = epochs;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version(format!(
                "config version {} (supported: {CONFIG_VERSION})",
                self.version
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer betas must lie in [0, 1), eps > 0, decay ≥ 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        let p = &self.perturb;
        if !(0.0..=1.0).contains(&p.jpeg_prob) || !(0.0..=1.0).contains(&p.blur_prob) {
            return Err(Error::Config("perturbation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
