//! Momentum descent with plateau-driven learning-rate steps, the two-step
//! schedule and the five method variants.

mod network;
mod stage;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassWeights, LossKind, LossSpec, Reduction};

pub use network::{LinearPixelModel, Network};
pub use stage::{
    dataset_loss, train_recipe, train_stage, train_two_step, train_variant, RecipeOutput,
    StageRunner, StageState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Initial learning rate of a second stage; `lr0` when unset.
    pub stage2_lr0: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub lr_divisor: f64,
    /// Trailing epochs examined by the plateau test.
    pub plateau_window: usize,
    pub min_rel_improvement: f64,
    /// Learning-rate divisions before a further plateau ends the stage.
    pub max_divisions: usize,
    pub max_epochs: usize,
    /// Epoch cap of a second stage; `max_epochs` when unset.
    pub stage2_max_epochs: Option<usize>,
    pub reduction: Reduction,
    /// Stops the focal factor's own gradient (comparison only).
    pub detach_focal_factor: bool,
    /// Dropout during training; off gives a deterministic objective.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            stage2_lr0: None,
            momentum: 0.95,
            batch_size: 1,
            lr_divisor: 2.0,
            plateau_window: 10,
            min_rel_improvement: 0.005,
            max_divisions: 4,
            max_epochs: 100,
            stage2_max_epochs: None,
            reduction: Reduction::Mean,
            detach_focal_factor: false,
            dropout: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Budgeted schedule for the 128x128 benchmark.
    pub fn desk() -> Self {
        Self {
            lr0: 0.001,
            stage2_lr0: Some(0.3),
            plateau_window: 5,
            max_epochs: 10,
            stage2_max_epochs: Some(16),
            ..Self::default()
        }
    }

    /// Epoch cap of stage `stage` (1-based).
    pub fn epoch_cap(&self, stage: u8) -> usize {
        match stage {
            1 => self.max_epochs,
            _ => self.stage2_max_epochs.unwrap_or(self.max_epochs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || self.stage2_lr0.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.stage2_max_epochs == Some(0) {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.lr_divisor > 1.0) {
            return Err(Error::Config("lr_divisor must be > 1".into()));
        }
        if self.plateau_window < 2 {
            return Err(Error::Config("plateau_window must be >= 2".into()));
        }
        Ok(())
    }
}

/// True when the loss improved by less than `min_rel_improvement` (relative)
/// from the first to the last of the trailing `window` epochs. Too little
/// history is never a plateau.
pub fn detect_plateau(losses: &[f64], window: usize, min_rel_improvement: f64) -> bool {
    if window < 2 || losses.len() < window {
        return false;
    }
    let w = &losses[losses.len() - window..];
    let (first, last) = (w[0], w[window - 1]);
    if first == 0.0 {
        return last >= first;
    }
    (first - last) / first.abs() < min_rel_improvement
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    /// Per-class mean IoU on the validation set, when one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub loss: LossSpec,
    /// Loss of the starting model over the data, dropout off.
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stages: Vec<StageSummary>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    epoch: usize,
    stage: u8,
    lr: f64,
    loss: f64,
}

impl TrainHistory {
    pub fn losses(&self, stage: u8) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.loss)
            .collect()
    }

    pub fn extend(&mut self, other: TrainHistory) {
        self.records.extend(other.records);
        self.stages.extend(other.stages);
    }

    /// `epoch,stage,lr,loss`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in &self.records {
            w.serialize(CsvRow {
                epoch: r.epoch,
                stage: r.stage,
                lr: r.lr,
                loss: r.loss,
            })
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let records = r
            .deserialize::<CsvRow>()
            .map(|row| {
                row.map(|c| EpochRecord {
                    epoch: c.epoch,
                    stage: c.stage,
                    lr: c.lr,
                    loss: c.loss,
                    val_iou: None,
                })
                .map_err(err)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            stages: vec![],
        })
    }
}

/// One stage of a recipe: loss kind and foreground weight (background is 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub kind: LossKind,
    pub foreground_weight: f64,
}

impl StagePlan {
    pub fn loss_spec(&self, num_classes: usize, cfg: &TrainConfig) -> Result<LossSpec> {
        let weights = ClassWeights::foreground(num_classes, self.foreground_weight)?;
        let mut spec = match self.kind {
            LossKind::CrossEntropy => LossSpec::cross_entropy(weights),
            LossKind::Focal => LossSpec::focal(weights),
        }
        .with_reduction(cfg.reduction);
        spec.detach_focal_factor = cfg.detach_focal_factor;
        Ok(spec)
    }
}

/// The five compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodVariant {
    /// Equally-weighted cross-entropy, then equally-weighted focal loss.
    #[serde(rename = "EWF")]
    Ewf,
    /// Cross-entropy with foreground weight 50.
    #[serde(rename = "W50")]
    W50,
    /// Equally-weighted focal loss from random initialization.
    #[serde(rename = "FOCAL_SCRATCH")]
    FocalScratch,
    /// Equally-weighted cross-entropy only.
    #[serde(rename = "EW_ONLY")]
    EwOnly,
    /// Weighted (50) cross-entropy, then weighted (50) focal loss.
    #[serde(rename = "WF50")]
    Wf50,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 5] = [
        MethodVariant::Ewf,
        MethodVariant::W50,
        MethodVariant::FocalScratch,
        MethodVariant::EwOnly,
        MethodVariant::Wf50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::Ewf => "EWF",
            MethodVariant::W50 => "W50",
            MethodVariant::FocalScratch => "FOCAL_SCRATCH",
            MethodVariant::EwOnly => "EW_ONLY",
            MethodVariant::Wf50 => "WF50",
        }
    }

    pub fn stages(self) -> Vec<StagePlan> {
        let ce = |w| StagePlan {
            kind: LossKind::CrossEntropy,
            foreground_weight: w,
        };
        let focal = |w| StagePlan {
            kind: LossKind::Focal,
            foreground_weight: w,
        };
        match self {
            MethodVariant::Ewf => vec![ce(1.0), focal(1.0)],
            MethodVariant::W50 => vec![ce(50.0)],
            MethodVariant::FocalScratch => vec![focal(1.0)],
            MethodVariant::EwOnly => vec![ce(1.0)],
            MethodVariant::Wf50 => vec![ce(50.0), focal(50.0)],
        }
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s}")))
    }
}

impl std::fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_examples() {
        let halving: Vec<f64> = (0..12).map(|k| 0.5f64.powi(k)).collect();
        assert!(!detect_plateau(&halving, 10, 0.005));
        assert!(detect_plateau(&[2.0; 10], 10, 0.005));
        assert!(detect_plateau(&[1.0, 0.999, 0.9985], 3, 0.005));
        assert!(!detect_plateau(&[1.0, 0.999], 3, 0.005));
        assert!(!detect_plateau(&[1.0, 0.9], 2, 0.005));
    }

    #[test]
    fn variant_recipes() {
        let w50 = MethodVariant::W50.stages();
        assert_eq!(w50.len(), 1);
        let spec = w50[0].loss_spec(6, &TrainConfig::default()).unwrap();
        assert_eq!(spec.weights.as_slice(), &[1.0, 50.0, 50.0, 50.0, 50.0, 50.0]);
        let wf = MethodVariant::Wf50.stages();
        assert_eq!(wf[1].kind, LossKind::Focal);
        assert_eq!(wf[1].foreground_weight, 50.0);
        assert_eq!(MethodVariant::Ewf.stages()[0], MethodVariant::EwOnly.stages()[0]);
        assert_eq!("ew_only".parse::<MethodVariant>().unwrap(), MethodVariant::EwOnly);
        assert_eq!(
            serde_json::to_string(&MethodVariant::FocalScratch).unwrap(),
            "\"FOCAL_SCRATCH\""
        );
    }

    #[test]
    fn history_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = TrainHistory {
            records: vec![
                EpochRecord { epoch: 1, stage: 1, lr: 0.01, loss: 0.5, val_iou: None },
                EpochRecord { epoch: 2, stage: 1, lr: 0.005, loss: 0.25, val_iou: None },
            ],
            stages: vec![],
        };
        h.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("epoch,stage,lr,loss\n"));
        assert_eq!(TrainHistory::read_csv(&p).unwrap(), h);
    }
}
