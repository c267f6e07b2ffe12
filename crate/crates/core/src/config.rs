//! Layered configuration: defaults < config file < environment < flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LoadOptions;
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::prune::PruneMode;
use crate::sweep::{CapacityRange, Schedule};

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "CHAOSEVAL_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {}: {source}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid value {value:?} for {name}: {message}")]
    Env {
        name: String,
        value: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// One source of settings; unset fields defer to lower layers.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub iou_threshold: Option<f64>,
    pub mode: Option<PruneMode>,
    pub range: Option<CapacityRange>,
    pub coarse_step: Option<usize>,
    pub workers: Option<usize>,
    pub lenient: Option<bool>,
    pub ignore_gt_score: Option<bool>,
}

impl ConfigLayer {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `CHAOSEVAL_IOU`, `CHAOSEVAL_MODE`, `CHAOSEVAL_RANGE`,
    /// `CHAOSEVAL_COARSE_STEP`, `CHAOSEVAL_WORKERS`, `CHAOSEVAL_LENIENT` and
    /// `CHAOSEVAL_IGNORE_GT_SCORE` through `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        fn get<T: std::str::FromStr>(
            lookup: &impl Fn(&str) -> Option<String>,
            name: &str,
        ) -> Result<Option<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            match lookup(name) {
                None => Ok(None),
                Some(value) => value.trim().parse().map(Some).map_err(|e: T::Err| ConfigError::Env {
                    name: name.to_string(),
                    value,
                    message: e.to_string(),
                }),
            }
        }
        Ok(Self {
            iou_threshold: get(&lookup, "CHAOSEVAL_IOU")?,
            mode: get(&lookup, "CHAOSEVAL_MODE")?,
            range: get(&lookup, "CHAOSEVAL_RANGE")?,
            coarse_step: get(&lookup, "CHAOSEVAL_COARSE_STEP")?,
            workers: get(&lookup, "CHAOSEVAL_WORKERS")?,
            lenient: get(&lookup, "CHAOSEVAL_LENIENT")?,
            ignore_gt_score: get(&lookup, "CHAOSEVAL_IGNORE_GT_SCORE")?,
        })
    }

    /// `self` wins over `lower` field by field.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            iou_threshold: self.iou_threshold.or(lower.iou_threshold),
            mode: self.mode.or(lower.mode),
            range: self.range.or(lower.range),
            coarse_step: self.coarse_step.or(lower.coarse_step),
            workers: self.workers.or(lower.workers),
            lenient: self.lenient.or(lower.lenient),
            ignore_gt_score: self.ignore_gt_score.or(lower.ignore_gt_score),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub iou_threshold: f64,
    pub mode: PruneMode,
    pub range: CapacityRange,
    pub schedule: Schedule,
    pub lenient: bool,
    pub ignore_gt_score: bool,
    /// Execution-only: results never depend on it, so it is left out of
    /// emitted metadata.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            mode: PruneMode::Box,
            range: CapacityRange::default(),
            schedule: Schedule::Exhaustive,
            lenient: false,
            ignore_gt_score: false,
            workers: default_workers(),
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Config {
    /// Applies a merged layer over the defaults and validates the result.
    pub fn resolve(layer: ConfigLayer) -> Result<Self, ConfigError> {
        let d = Config::default();
        let cfg = Config {
            iou_threshold: layer.iou_threshold.unwrap_or(d.iou_threshold),
            mode: layer.mode.unwrap_or(d.mode),
            range: layer.range.unwrap_or(d.range),
            schedule: match layer.coarse_step {
                Some(coarse_step) => Schedule::TwoPass { coarse_step },
                None => Schedule::Exhaustive,
            },
            lenient: layer.lenient.unwrap_or(d.lenient),
            ignore_gt_score: layer.ignore_gt_score.unwrap_or(d.ignore_gt_score),
            workers: layer.workers.unwrap_or(d.workers),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "iou threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if let Schedule::TwoPass { coarse_step } = self.schedule {
            if coarse_step < 2 || coarse_step <= self.range.step {
                return Err(ConfigError::Invalid(format!(
                    "coarse step {coarse_step} must be at least 2 and larger than the range step {}",
                    self.range.step
                )));
            }
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            lenient: self.lenient,
            ignore_gt_score: self.ignore_gt_score,
        }
    }
}
