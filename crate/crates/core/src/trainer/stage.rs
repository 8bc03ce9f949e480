use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{detect_plateau, EpochRecord, StagePlan, StageSummary, TrainConfig, TrainHistory};
use super::MethodVariant;
use crate::error::{Error, Result};
use crate::losses::{softmax_pixelwise, LossSpec};
use crate::metrics::class_ious;
use crate::pipeline::TrainSet;
use crate::synth::sub_seed;
use crate::types::{LogitCube, Sample};
use crate::unet::{Checkpoint, Model, StageTag};

/// Mean loss of `model` over `data` with dropout off, summed in index order.
pub fn dataset_loss<N: Network>(model: &N, data: &dyn TrainSet, spec: &LossSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let s = data.get(i)?;
        let (logits, _) = model.forward_record(&s.image, None)?;
        total += spec.evaluate_ids(&softmax_pixelwise(&logits)?, s.labels.ids())?.value;
    }
    Ok(total / data.len() as f64)
}

/// Everything needed to continue a stage after the last completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: u8,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub divisions: usize,
    /// Epoch losses since the last learning-rate change.
    pub since_change: Vec<f64>,
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub done: bool,
    pub records: Vec<EpochRecord>,
    pub spec: LossSpec,
    pub config: TrainConfig,
}

/// One training stage, advanced an epoch at a time.
#[derive(Debug, Clone)]
pub struct StageRunner<N: Network> {
    pub model: N,
    pub velocity: N,
    /// Parameters at the end of the lowest-loss epoch so far.
    pub best: N,
    pub state: StageState,
    /// Optional held-out samples scored after every epoch.
    pub validation: Option<Vec<Sample>>,
}

fn non_finite(logits: &LogitCube) -> bool {
    logits.data().iter().any(|v| !v.is_finite())
}

impl<N: Network> StageRunner<N> {
    pub fn new(
        model: N,
        data: &dyn TrainSet,
        spec: LossSpec,
        cfg: &TrainConfig,
        stage: u8,
        lr0: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let initial_loss = dataset_loss(&model, data, &spec)?;
        Ok(Self {
            velocity: model.zeroed(),
            best: model.clone(),
            model,
            state: StageState {
                stage,
                epoch: 0,
                lr: lr0,
                divisions: 0,
                since_change: vec![],
                best_loss: None,
                best_epoch: 0,
                initial_loss,
                done: false,
                records: vec![],
                spec,
                config: cfg.clone(),
            },
            validation: None,
        })
    }

    fn apply(&mut self, grad: &N, scale: f32) {
        let lr = self.state.lr as f32;
        let mu = self.state.config.momentum as f32;
        for ((p, v), g) in self
            .model
            .param_slices_mut()
            .into_iter()
            .zip(self.velocity.param_slices_mut())
            .zip(grad.param_slices())
        {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g * scale;
                *p -= lr * *v;
            }
        }
    }

    fn validation_iou(&self) -> Result<Option<Vec<f64>>> {
        let Some(val) = &self.validation else {
            return Ok(None);
        };
        let mut sums: Vec<f64> = Vec::new();
        for s in val {
            let (logits, _) = self.model.forward_record(&s.image, None)?;
            let seg = softmax_pixelwise(&logits)?.argmax();
            let ious = class_ious(&seg, &s.labels)?;
            sums.resize(ious.len(), 0.0);
            sums.iter_mut().zip(&ious).for_each(|(a, b)| *a += b);
        }
        Ok(Some(sums.iter().map(|v| v / val.len().max(1) as f64).collect()))
    }

    /// Runs one epoch. A non-finite loss is a divergence error; `best` is
    /// never touched by a failing epoch.
    pub fn run_epoch(&mut self, data: &dyn TrainSet) -> Result<EpochRecord> {
        if self.state.done {
            return Err(Error::Contract("stage already finished".into()));
        }
        let n = data.len();
        if n == 0 {
            return Err(Error::Contract("training data is empty".into()));
        }
        let (stage, epoch) = (self.state.stage as i64, self.state.epoch as i64 + 1);
        let seed = self.state.config.seed;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, &[stage, epoch])));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[stage, epoch, 1]));
        let dropout = self.state.config.dropout;
        let bs = self.state.config.batch_size;
        let diverged = |loss: f64| Error::Divergence {
            stage: stage as u8,
            epoch: epoch as usize,
            loss,
        };

        let mut losses = vec![0.0f64; n];
        let mut grad = self.model.zeroed();
        let mut in_batch = 0usize;
        for &i in &order {
            let s = data.get(i)?;
            let rng = if dropout { Some(&mut drop_rng) } else { None };
            let (logits, tape) = self.model.forward_record(&s.image, rng)?;
            if non_finite(&logits) {
                return Err(diverged(f64::NAN));
            }
            let out = self
                .state
                .spec
                .evaluate_ids(&softmax_pixelwise(&logits)?, s.labels.ids())?;
            if !out.value.is_finite() {
                return Err(diverged(out.value));
            }
            losses[i] = out.value;
            self.model.backward(&tape, &out.grad, &mut grad)?;
            in_batch += 1;
            if in_batch == bs {
                self.apply(&grad, 1.0 / bs as f32);
                grad = self.model.zeroed();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            self.apply(&grad, 1.0 / in_batch as f32);
        }
        let loss = losses.iter().sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(diverged(loss));
        }

        let st = &mut self.state;
        st.epoch += 1;
        let record = EpochRecord {
            epoch: st.epoch,
            stage: st.stage,
            lr: st.lr,
            loss,
            val_iou: None,
        };
        if st.best_loss.is_none_or(|b| loss < b) {
            st.best_loss = Some(loss);
            st.best_epoch = st.epoch;
            self.best = self.model.clone();
        }
        let st = &mut self.state;
        st.since_change.push(loss);
        let cfg = &st.config;
        if detect_plateau(&st.since_change, cfg.plateau_window, cfg.min_rel_improvement) {
            if st.divisions < cfg.max_divisions {
                st.lr /= cfg.lr_divisor;
                st.divisions += 1;
                st.since_change.clear();
            } else {
                st.done = true;
            }
        }
        if st.epoch >= cfg.epoch_cap(st.stage) {
            st.done = true;
        }
        let record = EpochRecord {
            val_iou: self.validation_iou()?,
            ..record
        };
        self.state.records.push(record.clone());
        Ok(record)
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn run(mut self, data: &dyn TrainSet) -> Result<(N, TrainHistory)> {
        while !self.state.done {
            self.run_epoch(data)?;
        }
        Ok(self.finish())
    }

    /// The best model and this stage's history.
    pub fn finish(self) -> (N, TrainHistory) {
        let st = self.state;
        let summary = StageSummary {
            stage: st.stage,
            loss: st.spec,
            initial_loss: st.initial_loss,
            best_loss: st.best_loss.unwrap_or(st.initial_loss),
            best_epoch: st.best_epoch,
            epochs: st.epoch,
        };
        (
            self.best,
            TrainHistory {
                records: st.records,
                stages: vec![summary],
            },
        )
    }
}

fn tag(stage: u8) -> StageTag {
    if stage <= 1 {
        StageTag::Stage1
    } else {
        StageTag::Stage2
    }
}

impl StageRunner<Model> {
    /// Writes `stage{n}_state.ckpt` (model, velocity, state) and
    /// `stage{n}_best.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let s = self.state.stage;
        Checkpoint {
            model: self.model.clone(),
            stage: tag(s),
            velocity: Some(self.velocity.clone()),
            state: Some(serde_json::to_value(&self.state)?),
        }
        .save(dir.join(format!("stage{s}_state.ckpt")))?;
        Checkpoint::new(self.best.clone(), tag(s)).save(dir.join(format!("stage{s}_best.ckpt")))
    }

    pub fn load(dir: &Path, stage: u8) -> Result<Self> {
        let ck = Checkpoint::load(dir.join(format!("stage{stage}_state.ckpt")))?;
        let state: StageState = serde_json::from_value(
            ck.state
                .ok_or_else(|| Error::Checkpoint("no trainer state in checkpoint".into()))?,
        )?;
        let velocity = ck
            .velocity
            .ok_or_else(|| Error::Checkpoint("no optimizer velocity in checkpoint".into()))?;
        let best = Checkpoint::load(dir.join(format!("stage{stage}_best.ckpt")))?.model;
        Ok(Self {
            model: ck.model,
            velocity,
            best,
            state,
            validation: None,
        })
    }
}

/// One stage from `cfg.lr0`.
pub fn train_stage<N: Network>(
    model: N,
    data: &dyn TrainSet,
    spec: LossSpec,
    cfg: &TrainConfig,
) -> Result<(N, TrainHistory)> {
    StageRunner::new(model, data, spec, cfg, 1, cfg.lr0)?.run(data)
}

#[derive(Debug, Clone)]
pub struct RecipeOutput<N> {
    /// Best model of the last stage.
    pub model: N,
    /// Best model of every stage, in order.
    pub stage_models: Vec<N>,
    pub history: TrainHistory,
}

fn num_classes(data: &dyn TrainSet) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    Ok(data.get(0)?.labels.num_classes())
}

/// Runs the stages in order, each starting from the previous stage's best
/// model with fresh optimizer velocity.
pub fn train_recipe<N: Network>(
    model: N,
    data: &dyn TrainSet,
    stages: &[StagePlan],
    cfg: &TrainConfig,
) -> Result<RecipeOutput<N>> {
    let nc = num_classes(data)?;
    let mut current = model;
    let mut history = TrainHistory::default();
    let mut stage_models = Vec::with_capacity(stages.len());
    for (k, plan) in stages.iter().enumerate() {
        let lr0 = if k == 0 {
            cfg.lr0
        } else {
            cfg.stage2_lr0.unwrap_or(cfg.lr0)
        };
        let spec = plan.loss_spec(nc, cfg)?;
        let runner = StageRunner::new(current, data, spec, cfg, k as u8 + 1, lr0)?;
        let (best, h) = runner.run(data)?;
        history.extend(h);
        stage_models.push(best.clone());
        current = best;
    }
    Ok(RecipeOutput {
        model: current,
        stage_models,
        history,
    })
}

/// Equally-weighted cross-entropy, then equally-weighted focal loss from the
/// stage-1 result.
pub fn train_two_step<N: Network>(
    model: N,
    data: &dyn TrainSet,
    cfg: &TrainConfig,
) -> Result<RecipeOutput<N>> {
    train_recipe(model, data, &MethodVariant::Ewf.stages(), cfg)
}

pub fn train_variant<N: Network>(
    variant: MethodVariant,
    model: N,
    data: &dyn TrainSet,
    cfg: &TrainConfig,
) -> Result<RecipeOutput<N>> {
    train_recipe(model, data, &variant.stages(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ClassWeights, LossKind};
    use crate::pipeline::InMemorySet;
    use crate::trainer::LinearPixelModel;
    use crate::types::{LabelMap, NormalizedImage};
    use crate::unet::ModelConfig;

    fn pixel_set() -> InMemorySet {
        let s = |x: f32, id: u8| Sample {
            image: NormalizedImage::new(1, 1, vec![x]).unwrap(),
            labels: LabelMap::new(1, 1, 6, vec![id]).unwrap(),
        };
        InMemorySet::new(vec![s(0.8, 3)])
    }

    #[test]
    fn single_pixel_toy_converges() {
        let data = pixel_set();
        let cfg = TrainConfig {
            lr0: 0.5,
            max_epochs: 400,
            dropout: false,
            ..TrainConfig::default()
        };
        let spec = LossSpec::cross_entropy(ClassWeights::equal(6));
        let (m, h) = train_stage(LinearPixelModel::zeros(6), &data, spec.clone(), &cfg).unwrap();
        assert!(h.stages[0].best_loss < 1e-3, "{:?}", h.stages[0]);
        assert!(dataset_loss(&m, &data, &spec).unwrap() < 1e-3);
        let (logits, _) = m.forward_record(&data.samples[0].image, None).unwrap();
        let p = softmax_pixelwise(&logits).unwrap();
        assert_eq!(p.argmax().ids(), &[3]);
    }

    fn tiny_unet_data() -> (Model, InMemorySet) {
        let cfg = ModelConfig {
            n_blocks: 1,
            base_channels: 2,
            input_width: 8,
            input_height: 8,
            ..ModelConfig::default()
        };
        let model = Model::build(&cfg, 5).unwrap();
        let samples = (0..3)
            .map(|k| {
                let px: Vec<f32> = (0..64).map(|i| ((i * (k + 3)) % 11) as f32 / 10.0).collect();
                let ids: Vec<u8> = (0..64).map(|i| if (i + k) % 9 == 0 { 1 + (k as u8) } else { 0 }).collect();
                Sample {
                    image: NormalizedImage::new(8, 8, px).unwrap(),
                    labels: LabelMap::new(8, 8, 6, ids).unwrap(),
                }
            })
            .collect();
        (model, InMemorySet::new(samples))
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, data) = tiny_unet_data();
        let cfg = TrainConfig {
            lr0: 0.0,
            max_epochs: 4,
            dropout: false,
            ..TrainConfig::default()
        };
        let spec = LossSpec::cross_entropy(ClassWeights::equal(6));
        let (m, h) = train_stage(model.clone(), &data, spec, &cfg).unwrap();
        assert_eq!(m, model);
        let l = h.losses(1);
        assert_eq!(l.len(), 4);
        assert!(l.iter().all(|&v| v == l[0]));
        assert_eq!(l[0], h.stages[0].initial_loss);
    }

    #[test]
    fn repeatable_and_resumable() {
        let (model, data) = tiny_unet_data();
        let cfg = TrainConfig {
            lr0: 0.05,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let spec = LossSpec::focal(ClassWeights::equal(6));
        let (m1, h1) = train_stage(model.clone(), &data, spec.clone(), &cfg).unwrap();
        let (m2, h2) = train_stage(model.clone(), &data, spec.clone(), &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);

        let dir = tempfile::tempdir().unwrap();
        let mut r = StageRunner::new(model, &data, spec, &cfg, 1, cfg.lr0).unwrap();
        r.run_epoch(&data).unwrap();
        r.run_epoch(&data).unwrap();
        r.save(dir.path()).unwrap();
        let mut resumed = StageRunner::<Model>::load(dir.path(), 1).unwrap();
        let next = resumed.run_epoch(&data).unwrap();
        let straight = r.run_epoch(&data).unwrap();
        assert_eq!(next, straight);
        assert_eq!(next.loss, h1.records[2].loss);
    }

    #[test]
    fn divergence_is_reported_and_best_survives() {
        let (model, data) = tiny_unet_data();
        let cfg = TrainConfig {
            lr0: 1e12,
            max_epochs: 20,
            dropout: false,
            ..TrainConfig::default()
        };
        let spec = LossSpec::cross_entropy(ClassWeights::foreground(6, 50.0).unwrap());
        let mut r = StageRunner::new(model, &data, spec, &cfg, 1, cfg.lr0).unwrap();
        let mut err = None;
        for _ in 0..20 {
            match r.run_epoch(&data) {
                Ok(_) => {}
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
        for p in r.best.param_slices() {
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn recipe_structure() {
        let (model, data) = tiny_unet_data();
        let cfg = TrainConfig {
            lr0: 0.02,
            stage2_lr0: Some(0.01),
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let ewf = train_two_step(model.clone(), &data, &cfg).unwrap();
        assert_eq!(ewf.stage_models.len(), 2);
        assert_eq!(ewf.history.stages[1].loss.kind, LossKind::Focal);
        assert_eq!(ewf.history.records.iter().filter(|r| r.stage == 2).count(), 2);
        assert_eq!(ewf.history.records.iter().find(|r| r.stage == 2).unwrap().lr, 0.01);
        // stage 2 starts where stage 1 ended
        let focal = ewf.history.stages[1].loss.clone();
        let at_stage1 = dataset_loss(&ewf.stage_models[0], &data, &focal).unwrap();
        assert_eq!(ewf.history.stages[1].initial_loss, at_stage1);
        // stage 1 alone is the equally-weighted-only variant
        let ew = train_variant(MethodVariant::EwOnly, model.clone(), &data, &cfg).unwrap();
        assert_eq!(ew.model, ewf.stage_models[0]);
        assert_eq!(ew.history.records, ewf.history.records[..2].to_vec());
        let same = train_variant(MethodVariant::Ewf, model, &data, &cfg).unwrap();
        assert_eq!(same.model, ewf.model);
    }
}
