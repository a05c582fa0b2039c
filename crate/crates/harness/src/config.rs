//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! vocab = 32
//! d_model = 64
//! depth = 2
//! seq_len = 64
//! setting = "S5"
//!
//! [optim]
//! kind = "msgdw"
//! lr = 0.25
//! weight_decay = 1e-4
//! clip = 1.0
//!
//! [train]
//! steps = 2000
//! batch = 32
//!
//! [data]
//! order = 2
//! ```
//!
//! Unknown keys are rejected and every value is validated before any
//! compute starts.

use std::path::{Path, PathBuf};

use dnt_core::diagnostics::BinSpec;
use dnt_core::model::{ModelConfig, NormSetting, Precision};
use dnt_core::optim::{Hyper, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_CONCENTRATION;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    /// Validation windows evaluated for the initial and final loss.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    /// Evaluate on the validation windows every this many steps; 0 turns
    /// periodic evaluation off.
    #[serde(default)]
    pub eval_every: usize,
    /// Gradient snapshots at these fractions of `steps`.
    #[serde(default = "default_snapshots")]
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub bins: BinSpec,
    /// Activation precision of the training and evaluation passes.
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_eval_windows() -> usize {
    32
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_snapshots() -> Vec<f64> {
    vec![0.01, 0.1, 0.5, 0.9]
}

impl TrainSpec {
    /// Distinct 0-based step indices of the gradient snapshots.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        if self.steps == 0 {
            return Vec::new();
        }
        let mut s: Vec<usize> = self
            .snapshots
            .iter()
            .map(|f| ((f * self.steps as f64).round() as usize).min(self.steps - 1))
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_order")]
    pub order: usize,
    /// Total generated tokens, split into training and validation parts.
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    /// Seeds the transition table and the token stream; defaults to the run
    /// seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_order() -> usize {
    2
}
fn default_length() -> usize {
    400_000
}
fn default_concentration() -> f64 {
    DEFAULT_CONCENTRATION
}
fn default_valid_fraction() -> f64 {
    0.1
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            order: default_order(),
            length: default_length(),
            concentration: default_concentration(),
            valid_fraction: default_valid_fraction(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: Hyper,
    pub train: TrainSpec,
    #[serde(default)]
    pub data: DataSpec,
}

impl RunConfig {
    /// Default toy-scale run for a setting and optimizer.
    pub fn toy(setting: NormSetting, kind: OptimizerKind) -> Self {
        Self {
            seed: 0,
            out_dir: None,
            model: ModelConfig::new(32, 64, 2, 64, setting),
            optim: crate::defaults::hyper(kind),
            train: TrainSpec {
                steps: 2000,
                batch: 32,
                eval_windows: default_eval_windows(),
                eval_every: 0,
                snapshots: default_snapshots(),
                bins: BinSpec::default(),
                precision: default_precision(),
            },
            data: DataSpec::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.train.bins.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        let t = &self.train;
        if t.batch == 0 {
            return bad("train.batch must be >= 1".into());
        }
        if t.eval_windows == 0 {
            return bad("train.eval_windows must be >= 1".into());
        }
        if let Some(f) = t.snapshots.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("snapshot fraction {f} outside [0, 1]"));
        }
        let d = &self.data;
        if !(1..=2).contains(&d.order) {
            return bad(format!("data.order must be 1 or 2, got {}", d.order));
        }
        if !(d.concentration > 0.0 && d.concentration.is_finite()) {
            return bad(format!("data.concentration must be positive, got {}", d.concentration));
        }
        if !(d.valid_fraction > 0.0 && d.valid_fraction < 1.0) {
            return bad(format!("data.valid_fraction must lie in (0, 1), got {}", d.valid_fraction));
        }
        let window = self.model.seq_len + 1;
        let valid = (d.length as f64 * d.valid_fraction) as usize;
        if d.length - valid <= window || valid <= window {
            return bad(format!(
                "data.length {} too short for windows of {window} tokens in both splits",
                d.length
            ));
        }
        Ok(())
    }
}
