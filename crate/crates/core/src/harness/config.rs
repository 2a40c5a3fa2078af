use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FpnConfig, NUM_BLOCKS};
use crate::combiner::{GcnConfig, LossWeights};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{LionConfig, OptimizerConfig, SgdConfig};
use crate::selector::SelectionConfig;

/// One training run. Loaded from TOML; every key is optional and falls back
/// to the default below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub n_sel: [usize; NUM_BLOCKS],
    pub fpn_size: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    pub block_strides: [usize; NUM_BLOCKS],
    pub conv_kernel: usize,
    pub gcn: GcnConfig,
    pub loss_weights: LossWeights,
    pub input_center: f64,
    pub input_scale: f64,
    /// Curated manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Split scored by `eval` when none is given.
    pub eval_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            seed: 0,
            resolution: backbone.input_resolution,
            batch_size: 16,
            epochs: 100,
            optimizer: OptimizerConfig::default(),
            n_sel: SelectionConfig::default().n_sel,
            fpn_size: FpnConfig::default().fpn_size,
            block_channels: backbone.block_channels,
            block_strides: backbone.block_strides,
            conv_kernel: backbone.conv_kernel,
            gcn: GcnConfig::default(),
            loss_weights: LossWeights::default(),
            input_center: 0.5,
            input_scale: 2.0,
            manifest: None,
            eval_split: "test1".into(),
        }
    }
}

impl RunConfig {
    /// Desk-scale configuration for the synthetic experiments.
    pub fn toy() -> Self {
        let m = ModelConfig::toy(4, 64);
        Self {
            resolution: 64,
            epochs: 50,
            optimizer: OptimizerConfig::Lion(LionConfig {
                delta: 1e-3,
                ..LionConfig::default()
            }),
            n_sel: m.selection.n_sel,
            fpn_size: m.fpn.fpn_size,
            block_channels: m.backbone.block_channels,
            block_strides: m.backbone.block_strides,
            conv_kernel: m.backbone.conv_kernel,
            ..Self::default()
        }
    }

    /// The toy configuration trained with momentum SGD instead of LION.
    pub fn toy_sgd() -> Self {
        Self {
            optimizer: OptimizerConfig::Sgd(SgdConfig {
                lr: 3e-3,
                momentum: 0.9,
            }),
            ..Self::toy()
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            backbone: BackboneConfig {
                input_resolution: self.resolution,
                block_channels: self.block_channels,
                block_strides: self.block_strides,
                conv_kernel: self.conv_kernel,
            },
            fpn: FpnConfig {
                fpn_size: self.fpn_size,
            },
            selection: SelectionConfig { n_sel: self.n_sel },
            gcn: self.gcn,
            loss_weights: self.loss_weights,
            input_center: self.input_center,
            input_scale: self.input_scale,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        self.optimizer.validate()?;
        self.model_config(num_classes).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a config file, resolving `manifest` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::TomlDe(inner) => Error::Config(format!("{}: {inner}", path.display())),
            other => other,
        })?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }
}
