//! Run configuration: one TOML file holding every module's settings.
//!
//! ```toml
//! seed = 0
//! [dataset]   # scene generator and split sizes
//! [net]       # network shapes
//! [train]     # schedule, optimizers, loss weights
//! [eval]      # thresholds and report options
//! ```
//!
//! Missing keys take defaults; unknown keys are rejected. The global
//! `seed` overrides `train.seed`. Dataset scene seeds are part of
//! `[dataset]`, so the data does not change with the training seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depthlayer::DEFAULT_DEPTH_THRESHOLD;
use crate::error::{Error, Result};
use crate::inference::EVAL_EXPANSION;
use crate::maskops::DEFAULT_THRESHOLD;
use crate::netarch::NetConfig;
use crate::scenegen::DatasetConfig;
use crate::trainer::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Binarization threshold for predicted masks.
    pub threshold: f32,
    /// Per-side growth of the visible box at inference.
    pub expansion: f64,
    pub depth_threshold: f64,
    /// Objects shown in the image grid.
    pub grid_rows: usize,
    /// Also score the nearest-neighbor painting baseline.
    pub nn_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            expansion: EVAL_EXPANSION,
            depth_threshold: DEFAULT_DEPTH_THRESHOLD,
            grid_rows: 16,
            nn_baseline: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold = {} must lie in (0, 1]",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.expansion) {
            return Err(Error::Config(format!(
                "eval.expansion = {} must lie in [0, 1]",
                self.expansion
            )));
        }
        if !(0.0..=1.0).contains(&self.depth_threshold) {
            return Err(Error::Config(format!(
                "eval.depth_threshold = {} must lie in [0, 1]",
                self.depth_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            dataset: DatasetConfig::default(),
            net: NetConfig::default(),
            train,
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub device: Option<String>,
    pub threshold: Option<f32>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            Error::Config(format!("{}: {}", origin.display(), msg.trim()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Applies overrides, propagates the global seed and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.device {
            self.train.device = d.clone();
        }
        if let Some(t) = o.threshold {
            self.eval.threshold = t;
        }
        self.train.seed = self.seed;
        self.dataset.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
