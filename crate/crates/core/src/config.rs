//! Versioned TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{AugmentScheme, EnhanceConfig};
use crate::synth::{SceneConfig, SplitRule};
use crate::trainer::{MethodVariant, TrainConfig};
use crate::types::Normalization;
use crate::unet::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Axes of the ablation grid. Every combination is one cell per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridAxes {
    pub n_blocks: Vec<usize>,
    pub augmentation: Vec<AugmentScheme>,
    /// `false` = raw normalized frames, `true` = percentile rescale + CLAHE.
    pub enhancement: Vec<bool>,
    pub methods: Vec<MethodVariant>,
    /// Foreground weights for single-stage weighted cross-entropy cells.
    pub weights: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        Self {
            n_blocks: vec![1, 2, 3],
            augmentation: vec![AugmentScheme::None],
            enhancement: vec![false],
            methods: MethodVariant::ALL.to_vec(),
            weights: vec![1.0, 20.0, 50.0, 100.0, 500.0],
            seeds: vec![0, 1, 2],
        }
    }
}

impl GridAxes {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks.iter().any(|b| !(1..=6).contains(b)) {
            return Err(Error::Config("grid n_blocks must be in 1..=6".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("grid weights must be > 0".into()));
        }
        if self.n_blocks.is_empty()
            || self.augmentation.is_empty()
            || self.enhancement.is_empty()
            || self.seeds.is_empty()
            || (self.methods.is_empty() && self.weights.is_empty())
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub normalization: Normalization,
    pub scene: SceneConfig,
    pub split: SplitRule,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub grid: GridAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            normalization: Normalization::default(),
            scene: SceneConfig::default(),
            split: SplitRule::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            enhance: EnhanceConfig::default(),
            grid: GridAxes::default(),
        }
    }
}

impl ExperimentConfig {
    /// 128x128 frames, 200 train / 50 test, `F0 = 16` (2 blocks outside the grid).
    pub fn desk() -> Self {
        Self {
            scene: SceneConfig::desk(),
            split: SplitRule::Count { test_setups: 5 },
            model: ModelConfig::desk(2),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.grid.validate()?;
        if self.model.num_classes != self.scene.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, scene has {}",
                self.model.num_classes,
                self.scene.num_classes()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::desk()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "schema_version = 1\n[train]\nlr0 = 0.5\n[grid]\nseeds = [7]\nmethods = [\"EWF\", \"W50\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr0, 0.5);
        assert_eq!(cfg.train.momentum, 0.95);
        assert_eq!(cfg.grid.seeds, vec![7]);
        assert_eq!(cfg.grid.methods, vec![MethodVariant::Ewf, MethodVariant::W50]);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let e = ExperimentConfig::from_toml("schema_version = 9\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(ExperimentConfig::from_toml("schema_version = 1\n[train]\nlr0 = -1.0\n").is_err());
    }
}
