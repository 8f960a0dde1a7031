//! Run configuration for `flowscale train`.

use std::ops::Range;
use std::path::{Path, PathBuf};

use flowscale_align::TrainConfig;
use flowscale_climate::{cv_folds, Scheme, Variable};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the directory relative output paths resolve
/// against. Unset means the working directory.
pub const OUTPUT_ROOT_ENV: &str = "FLOWSCALE_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cv: Option<CvConfig>,
    pub output_dir: PathBuf,
    /// Write `checkpoints/step-N.ckpt` every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Log a progress line every this many steps; 0 disables.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Whether `train.noise_x` and `train.noise_y` were given explicitly.
    #[serde(skip)]
    pub noise_given: (bool, bool),
}

/// Dequantization noise amplitude for precipitation domains whose config
/// leaves it unset.
pub const PRECIP_DEQUANT_NOISE: f64 = 1e-2;

fn default_log_every() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Low-resolution domain.
    pub x: PathBuf,
    /// High-resolution domain.
    pub y: PathBuf,
    /// Training steps of each file. The two may be disjoint in time. When
    /// absent, the CV fold's training window is used, else every step.
    #[serde(default)]
    pub x_range: Option<Range<usize>>,
    #[serde(default)]
    pub y_range: Option<Range<usize>>,
    /// Defaults follow the variable.
    #[serde(default)]
    pub scheme_x: Option<Scheme>,
    #[serde(default)]
    pub scheme_y: Option<Scheme>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub steps: usize,
    pub hidden: usize,
    pub critic_widths: Vec<usize>,
    pub shared_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { levels: 2, steps: 4, hidden: 16, critic_widths: vec![16, 32, 1], shared_init: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub holdout: usize,
    pub val_len: usize,
    pub window: usize,
    pub k: usize,
    /// Fold to train on.
    #[serde(default)]
    pub fold: usize,
}

impl CvConfig {
    pub fn fold_ranges(&self, n_time: usize) -> Result<(Range<usize>, Range<usize>)> {
        let folds = cv_folds(n_time, self.holdout, self.val_len, self.window, self.k).map_err(|e| CliError::Config(e.to_string()))?;
        let f = folds
            .get(self.fold)
            .ok_or_else(|| CliError::Config(format!("fold {} out of range for k = {}", self.fold, self.k)))?;
        Ok((f.train.clone(), f.validation.clone()))
    }
}

pub fn default_scheme(v: Variable) -> Scheme {
    match v {
        Variable::MaxTemperature => Scheme::TemperatureStandardize,
        Variable::Precipitation => Scheme::PrecipLog1pStandardize,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        let given = |key: &str| raw.get("train").and_then(|t| t.get(key)).is_some();
        cfg.noise_given = (given("noise_x"), given("noise_y"));
        // data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.x = base.join(&cfg.data.x);
        cfg.data.y = base.join(&cfg.data.y);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let m = &self.model;
        if m.levels == 0 || m.steps == 0 || m.hidden == 0 {
            return Err(CliError::Config("levels, steps and hidden must be positive".into()));
        }
        if m.critic_widths.last().is_some_and(|&w| w != 1) {
            return Err(CliError::Config("the last critic width must be 1".into()));
        }
        for r in [&self.data.x_range, &self.data.y_range].into_iter().flatten() {
            if r.start >= r.end {
                return Err(CliError::Config(format!("empty training range {r:?}")));
            }
        }
        Ok(())
    }
}

/// `path` itself when absolute, else joined onto the output root.
pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
