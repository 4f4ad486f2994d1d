//! Declarative run configuration.
//!
//! A run is fully captured by one TOML file plus the seed: rerunning from the
//! same file reproduces every artifact byte for byte. All paths are resolved
//! relative to the config file's directory. `PTSEG_SEED` overrides the seed
//! and is recorded in the run record when used.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use ptseg_core::data::{NormStats, PreprocessConfig, SplitRule};
use ptseg_core::losses::Reduction;
use ptseg_core::model::ModelConfig;
use ptseg_core::trainer::{LossKind, TrainConfig, ValMetric};
use ptseg_core::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub split: SplitRule,
    #[serde(default = "default_target_size")]
    pub target_size: usize,
    #[serde(default = "default_hu_window")]
    pub hu_window: (i32, i32),
    #[serde(default)]
    pub norm_means: Option<Vec<f64>>,
    #[serde(default)]
    pub norm_stds: Option<Vec<f64>>,
    #[serde(default = "default_fixed_point_scale")]
    pub fixed_point_scale: f64,
    /// Directory of point-annotation JSON files (as written by `ptseg
    /// points`). When absent, annotations are generated from the masks
    /// using the run seed.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
}

fn default_target_size() -> usize {
    352
}

fn default_hu_window() -> (i32, i32) {
    (-1000, 400)
}

fn default_fixed_point_scale() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_stage_channels")]
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    2
}
fn default_stem_channels() -> usize {
    8
}
fn default_stage_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_kernel_size() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub loss: LossKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_reduction")]
    pub reduction: Reduction,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_val_metric")]
    pub val_metric: ValMetric,
    #[serde(default)]
    pub threads: usize,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_reduction() -> Reduction {
    Reduction::Mean
}
fn default_batch_size() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_val_metric() -> ValMetric {
    ValMetric::Dice
}

impl RunConfigFile {
    /// Parses and validates a config file; paths become absolute relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<RunConfigFile, Error> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        let mut cfg: RunConfigFile = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.data.manifest = base.join(&cfg.data.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(ann) = &cfg.data.annotations {
            cfg.data.annotations = Some(base.join(ann));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let field = |path: &str, message: String| Error::Config {
            path: path.to_string(),
            message,
        };
        if self.data.target_size == 0 {
            return Err(field("data.target_size", "must be positive".into()));
        }
        if self.data.hu_window.0 >= self.data.hu_window.1 {
            return Err(field(
                "data.hu_window",
                format!("low {} must be below high {}", self.data.hu_window.0, self.data.hu_window.1),
            ));
        }
        let stats = self.norm_stats();
        stats
            .validate()
            .map_err(|e| field("data.norm_means", e.to_string()))?;
        if stats.channels() != self.model.in_channels {
            return Err(field(
                "data.norm_means",
                format!(
                    "{} normalization channels but model.in_channels = {}",
                    stats.channels(),
                    self.model.in_channels
                ),
            ));
        }
        let model = self.model_config();
        model
            .validate()
            .map_err(|e| field("model", e.to_string()))?;
        if !self.data.target_size.is_multiple_of(model.downsample_factor()) {
            return Err(field(
                "data.target_size",
                format!(
                    "{} is not divisible by the model downsampling factor {}",
                    self.data.target_size,
                    model.downsample_factor()
                ),
            ));
        }
        self.train_config(self.seed)
            .validate()
            .map_err(|e| field("train", e.to_string()))?;
        Ok(())
    }

    /// Normalization statistics: explicit values, or identity sized to the
    /// model channels (with the standard 3-channel natural-image statistics
    /// when the model takes 3 channels and nothing is configured).
    pub fn norm_stats(&self) -> NormStats {
        match (&self.data.norm_means, &self.data.norm_stds) {
            (Some(means), Some(stds)) => NormStats {
                means: means.clone(),
                stds: stds.clone(),
            },
            _ => {
                if self.model.in_channels == 3 {
                    NormStats::imagenet()
                } else {
                    NormStats::identity(self.model.in_channels)
                }
            }
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_size: self.data.target_size,
            hu_window: self.data.hu_window,
            stats: self.norm_stats(),
            fixed_point_scale: self.data.fixed_point_scale,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.model.in_channels,
            num_classes: self.model.num_classes,
            stem_channels: self.model.stem_channels,
            stage_channels: self.model.stage_channels.clone(),
            kernel_size: self.model.kernel_size,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            seed,
            loss: self.train.loss,
            lambda_weight: self.train.lambda,
            consistency_reduction: self.train.reduction,
            model: self.model_config(),
            val_metric: self.train.val_metric,
            threads: self.train.threads,
            family_override: None,
        }
    }
}
