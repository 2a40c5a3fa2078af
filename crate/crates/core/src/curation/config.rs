use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::transform::AugmentationParams;
use crate::error::{Error, Result};

/// Which training set to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentedSet {
    A1,
    #[default]
    A2,
    A3,
    A4,
    /// No augmentation; fracture downsampled to `fracture_target`.
    Original,
    /// `per_class_target` for every class, `fracture_target` for fractures.
    Custom,
}

impl AugmentedSet {
    pub const PUBLISHED: [AugmentedSet; 4] = [Self::A1, Self::A2, Self::A3, Self::A4];

    /// Published per-class sizes (boneanomaly, fracture, metal, softtissue).
    pub fn targets(self) -> Option<[(&'static str, usize); 4]> {
        let t = |b, f, m, s| Some([("boneanomaly", b), ("fracture", f), ("metal", m), ("softtissue", s)]);
        match self {
            Self::A1 => t(1050, 1100, 1054, 1034),
            Self::A2 => t(490, 500, 496, 470),
            Self::A3 => t(280, 300, 310, 282),
            Self::A4 => t(210, 200, 186, 188),
            Self::Original | Self::Custom => None,
        }
    }
}

impl FromStr for AugmentedSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Self::A1),
            "a2" => Ok(Self::A2),
            "a3" => Ok(Self::A3),
            "a4" => Ok(Self::A4),
            "original" => Ok(Self::Original),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown augmented set {other:?}"))),
        }
    }
}

impl fmt::Display for AugmentedSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A1 => "A1",
            Self::A2 => "A2",
            Self::A3 => "A3",
            Self::A4 => "A4",
            Self::Original => "original",
            Self::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    /// Build the augmented `test1` set and the original `test2` set.
    #[default]
    Augmented,
    /// Build only `test2`.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub set: AugmentedSet,
    pub excluded_classes: BTreeSet<String>,
    pub min_class_count: usize,
    pub fracture_class: String,
    /// Used by the `original` and `custom` sets; presets carry their own.
    pub fracture_target: usize,
    /// Used by the `custom` set.
    pub per_class_target: usize,
    pub test_mode: TestMode,
    /// Share of each non-fracture class held out for testing.
    pub test_fraction: f64,
    /// Approximate `test1` size per class; also the fracture holdout.
    pub test1_per_class: usize,
    /// Fractures kept in `test2`, drawn from the `test1` fractures.
    pub test2_fracture: usize,
    pub split_fraction: f64,
    /// Keep every augmentation family inside one split.
    pub leakage_safe: bool,
    pub seed: u64,
    /// Side length images are resized to before augmentation.
    pub resolution: usize,
    pub augmentation: AugmentationParams,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            set: AugmentedSet::A2,
            excluded_classes: ["foreignbody".to_string()].into(),
            min_class_count: 50,
            fracture_class: "fracture".into(),
            fracture_target: 500,
            per_class_target: 500,
            test_mode: TestMode::Augmented,
            test_fraction: 0.2,
            test1_per_class: 120,
            test2_fracture: 25,
            split_fraction: 0.8,
            leakage_safe: true,
            seed: 0,
            resolution: 64,
            augmentation: AugmentationParams::default(),
        }
    }
}

impl CurationConfig {
    pub fn preset(set: AugmentedSet) -> Self {
        let mut cfg = Self { set, ..Self::default() };
        if set == AugmentedSet::Original {
            cfg.fracture_target = 100;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.fracture_target == 0 || self.per_class_target == 0 || self.test1_per_class == 0 {
            return Err(Error::Config("curation targets must be positive".into()));
        }
        if self.test2_fracture > self.test1_per_class {
            return Err(Error::Config("test2_fracture cannot exceed test1_per_class".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        self.augmentation.validate()
    }

    pub fn effective_fracture_target(&self) -> usize {
        self.set
            .targets()
            .and_then(|t| t.iter().find(|(c, _)| *c == self.fracture_class).map(|(_, n)| *n))
            .unwrap_or(self.fracture_target)
    }

    /// Post-augmentation size for a non-fracture class; `None` means keep the
    /// originals only.
    pub fn class_target(&self, class: &str) -> Result<Option<usize>> {
        match self.set {
            AugmentedSet::Original => Ok(None),
            AugmentedSet::Custom => Ok(Some(self.per_class_target)),
            set => set
                .targets()
                .and_then(|t| t.iter().find(|(c, _)| *c == class).map(|(_, n)| Some(*n)))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "set {set} has no target for class {class:?}; use the custom set"
                    ))
                }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
