//! Run configuration file (TOML).
//!
//! ```toml
//! out_dir = "runs"               # parent of per-run directories
//!
//! [model]
//! name = "lenet5"                # lenet5 | vgg7 | vgg16
//! width = 1.0                    # channel multiplier for the VGG models
//!
//! [data]
//! dataset = "mnist"              # mnist | cifar10
//! dir = "data/mnist"
//! train_limit = 10000            # optional: first N training images
//! test_limit = 2000              # optional: first N test images
//!
//! [train]
//! epochs = 60
//! batch_size = 64
//! initial_lr = 0.01
//! lr_drop_epochs = [15, 30]
//! lr_drop_factor = 10.0
//! weight_decay = 1e-4            # BC, BWN and TWN only
//! mode = "stq"                   # stq | bc | bwn | twn | fp
//! seed = 0
//! scale_scope = "per-filter"     # per-filter | per-layer
//! # clip_latent = true           # default: on for bc only
//! augment = false                # pad-crop-flip, CIFAR-10 only
//! eval_batch_size = 500
//! histogram_epochs = [0]
//!
//! [train.regularizer]
//! lambda = 0.1
//! gamma = 1e-2
//! delta = 1.55
//! beta_min = 0.786398163397448   # pi/4 + 1e-3
//! beta_max = 1.569796326794897   # pi/2 - 1e-3
//! tie_policy = "distance"        # distance | slope
//! prior_scope = "per-weight"     # per-weight | per-filter | per-layer
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stq_core::nn::{self, ModelSpec};
use stq_core::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Lenet5,
    Vgg7,
    Vgg16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub name: ModelName,
    pub width: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: ModelName::Lenet5,
            width: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            bail!("model.width must be positive, got {}", self.width);
        }
        Ok(match self.name {
            ModelName::Lenet5 => {
                if self.width != 1.0 {
                    bail!("model.width applies to the VGG models only");
                }
                nn::build_lenet5()
            }
            ModelName::Vgg7 => nn::build_vgg7(self.width),
            ModelName::Vgg16 => nn::build_vgg16(self.width),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetName,
    pub dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetName::Mnist,
            dir: PathBuf::from("data"),
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: default_out_dir(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<ModelSpec> {
        self.train.validate()?;
        let spec = self.model.spec()?;
        let want: &[usize] = match self.data.dataset {
            DatasetName::Mnist => &[1, 28, 28],
            DatasetName::Cifar10 => &[3, 32, 32],
        };
        if spec.input_shape != want {
            bail!(
                "model {:?} expects {:?} inputs, dataset {:?} provides {:?}",
                self.model.name,
                spec.input_shape,
                self.data.dataset,
                want
            );
        }
        if self.train.augment && self.data.dataset != DatasetName::Cifar10 {
            bail!("train.augment is only defined for cifar10");
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::parse("[train.regularizer]\nlambda = 0.1\nmu = 2").is_err());
        assert!(RunConfig::parse("[model]\nname = \"resnet\"").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(
            "[model]\nname = \"vgg7\"\nwidth = 0.25\n[data]\ndataset = \"cifar10\"\ntrain_limit = 10\n[train]\nmode = \"twn\"\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn dataset_model_mismatch() {
        let cfg = RunConfig::parse("[model]\nname = \"vgg7\"").unwrap();
        assert!(cfg.validate().is_err());
    }
}
