use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{evaluate_dataset, IoUReport, Segmenter};
use crate::pipeline::{augment, enhance, AugmentScheme, ManifestSet, TrainSet};
use crate::losses::LossKind;
use crate::trainer::{MethodVariant, StagePlan, StageRunner, TrainConfig, TrainHistory};
use crate::types::Sample;
use crate::unet::{Checkpoint, Model, ModelConfig, StageTag};

/// What a cell trains: one of the named methods or single-stage
/// cross-entropy with a given foreground weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Method(MethodVariant),
    Weighted(f64),
}

impl Recipe {
    pub fn stages(self) -> Vec<StagePlan> {
        match self {
            Recipe::Method(m) => m.stages(),
            Recipe::Weighted(w) => vec![StagePlan {
                kind: LossKind::CrossEntropy,
                foreground_weight: w,
            }],
        }
    }

    /// `EWF`, `W50`, ... or `WCE{w}`.
    pub fn label(self) -> String {
        match self {
            Recipe::Method(m) => m.name().to_string(),
            Recipe::Weighted(w) => format!("WCE{w}"),
        }
    }

    pub fn weight(self) -> Option<f64> {
        match self {
            Recipe::Method(_) => None,
            Recipe::Weighted(w) => Some(w),
        }
    }
}

/// One fully specified run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n_blocks: usize,
    pub augmentation: AugmentScheme,
    pub enhancement: bool,
    pub recipe: Recipe,
    pub seed: u64,
}

fn aug_code(a: AugmentScheme) -> &'static str {
    match a {
        AugmentScheme::None => "none",
        AugmentScheme::SchemeA => "a",
        AugmentScheme::SchemeB => "b",
    }
}

impl Cell {
    /// Encodes every axis, e.g. `b2_aug-none_enh-off_EWF_s0`.
    pub fn name(&self) -> String {
        format!(
            "b{}_aug-{}_enh-{}_{}_s{}",
            self.n_blocks,
            aug_code(self.augmentation),
            if self.enhancement { "on" } else { "off" },
            self.recipe.label(),
            self.seed
        )
    }
}

/// The ablation grid: axes and shared settings both come from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub config: ExperimentConfig,
}

impl ExperimentGrid {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Every cell, sorted by name.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.config.grid;
        let recipes: Vec<Recipe> = g
            .methods
            .iter()
            .map(|&m| Recipe::Method(m))
            .chain(g.weights.iter().map(|&w| Recipe::Weighted(w)))
            .collect();
        let mut cells = Vec::new();
        for &n_blocks in &g.n_blocks {
            for &augmentation in &g.augmentation {
                for &enhancement in &g.enhancement {
                    for &recipe in &recipes {
                        for &seed in &g.seeds {
                            cells.push(Cell {
                                n_blocks,
                                augmentation,
                                enhancement,
                                recipe,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        cells.sort_by_key(|c| c.name());
        cells.dedup_by_key(|c| c.name());
        cells
    }

    pub fn model_config(&self, cell: &Cell) -> ModelConfig {
        ModelConfig {
            n_blocks: cell.n_blocks,
            ..self.config.model.clone()
        }
    }

    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            seed: cell.seed,
            ..self.config.train.clone()
        }
    }

    /// Content key of the first `k + 1` stages of a cell. Cells whose recipes
    /// share a stage prefix share these keys, and so share the training.
    fn stage_key(&self, cell: &Cell, manifest_hash: &str, k: usize) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            version: &'a str,
            manifest: &'a str,
            normalization: crate::types::Normalization,
            enhance: Option<&'a crate::pipeline::EnhanceConfig>,
            augmentation: AugmentScheme,
            model: ModelConfig,
            train: TrainConfig,
            stages: &'a [StagePlan],
        }
        let stages = cell.recipe.stages();
        let key = Key {
            version: env!("CARGO_PKG_VERSION"),
            manifest: manifest_hash,
            normalization: self.config.normalization,
            enhance: cell.enhancement.then_some(&self.config.enhance),
            augmentation: cell.augmentation,
            model: self.model_config(cell),
            train: self.train_config(cell),
            stages: &stages[..=k],
        };
        let json = serde_json::to_vec(&key).expect("key serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash identifying a cell's complete result.
    pub fn cell_hash(&self, cell: &Cell, manifest_hash: &str) -> String {
        let last = cell.recipe.stages().len() - 1;
        let mut h = Sha256::new();
        h.update(cell.name().as_bytes());
        h.update(self.stage_key(cell, manifest_hash, last).as_bytes());
        hex::encode(h.finalize())
    }
}

/// One row of the results table. Failed cells keep their axes and carry the
/// error instead of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: String,
    pub n_blocks: usize,
    pub augmentation: AugmentScheme,
    pub enhancement: bool,
    pub method: String,
    pub weight: Option<f64>,
    pub seed: u64,
    pub per_class_miou: Vec<f64>,
    pub overall_miou: Option<f64>,
    pub foreground_miou: Option<f64>,
    /// Two-stage recipes: the same scores for the stage-1 model.
    pub stage1_per_class_miou: Option<Vec<f64>>,
    pub wall_time_s: f64,
    pub error: Option<String>,
    pub hash: String,
}

impl ResultRow {
    fn new(cell: &Cell, hash: String) -> Self {
        Self {
            cell: cell.name(),
            n_blocks: cell.n_blocks,
            augmentation: cell.augmentation,
            enhancement: cell.enhancement,
            method: cell.recipe.label(),
            weight: cell.recipe.weight(),
            seed: cell.seed,
            per_class_miou: vec![],
            overall_miou: None,
            foreground_miou: None,
            stage1_per_class_miou: None,
            wall_time_s: 0.0,
            error: None,
            hash,
        }
    }

    /// Fills the scores from an evaluation report.
    pub fn with_report(mut self, report: &IoUReport, stage1: Option<&IoUReport>) -> Self {
        self.per_class_miou = report.per_class_miou.clone();
        self.overall_miou = Some(report.overall_miou);
        self.foreground_miou = Some(report.foreground_miou());
        self.stage1_per_class_miou = stage1.map(|r| r.per_class_miou.clone());
        self
    }

    pub fn stage1_foreground_miou(&self) -> Option<f64> {
        self.stage1_per_class_miou
            .as_ref()
            .map(|v| v[1..].iter().sum::<f64>() / (v.len() - 1) as f64)
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Scores one cell's model; the perfect-oracle row is all ones.
pub fn evaluate_row(
    cell: &Cell,
    hash: String,
    model: &dyn Segmenter,
    stage1: Option<&dyn Segmenter>,
    test: &[(String, Sample)],
) -> Result<(ResultRow, IoUReport)> {
    let report = evaluate_dataset(model, test.iter().cloned())?;
    let s1 = stage1
        .map(|m| evaluate_dataset(m, test.iter().cloned()))
        .transpose()?;
    Ok((ResultRow::new(cell, hash).with_report(&report, s1.as_ref()), report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridResults {
    pub rows: Vec<ResultRow>,
}

impl GridResults {
    pub fn row(&self, cell: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    /// One line per cell, sorted by cell name.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| crate::metrics::iou::csv_err(path, e);
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let nc = self
            .rows
            .iter()
            .map(|r| r.per_class_miou.len())
            .max()
            .unwrap_or(0);
        let mut header: Vec<String> = [
            "cell", "n_blocks", "augmentation", "enhancement", "method", "weight", "seed",
        ]
        .map(String::from)
        .to_vec();
        header.extend((0..nc).map(|c| format!("miou_class_{c}")));
        header.extend(
            [
                "overall_miou",
                "foreground_miou",
                "stage1_foreground_miou",
                "wall_time_s",
                "status",
                "error",
            ]
            .map(String::from),
        );
        w.write_record(&header).map_err(err)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut rows: Vec<&ResultRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.cell.cmp(&b.cell));
        for r in rows {
            let mut rec = vec![
                r.cell.clone(),
                r.n_blocks.to_string(),
                aug_code(r.augmentation).to_string(),
                r.enhancement.to_string(),
                r.method.clone(),
                opt(r.weight),
                r.seed.to_string(),
            ];
            rec.extend((0..nc).map(|c| opt(r.per_class_miou.get(c).copied())));
            rec.push(opt(r.overall_miou));
            rec.push(opt(r.foreground_miou));
            rec.push(opt(r.stage1_foreground_miou()));
            rec.push(format!("{:.3}", r.wall_time_s));
            rec.push(if r.is_ok() { "ok" } else { "failed" }.into());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Retrain even when a matching result exists.
    pub force: bool,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageDone {
    history: TrainHistory,
    wall_time_s: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn stage_tag(k: usize) -> StageTag {
    if k == 0 {
        StageTag::Stage1
    } else {
        StageTag::Stage2
    }
}

/// Runs (or resumes) one stage in `dir`, checkpointing after every epoch.
fn run_cached_stage(
    dir: &Path,
    init: &Model,
    data: &dyn TrainSet,
    plan: &StagePlan,
    cfg: &TrainConfig,
    k: usize,
    opts: &GridOptions,
) -> Result<(Model, StageDone)> {
    let done_path = dir.join("done.json");
    let best_path = dir.join(format!("stage{}_best.ckpt", k + 1));
    if !opts.force && done_path.exists() {
        let done: StageDone = read_json(&done_path)?;
        return Ok((Checkpoint::load(&best_path)?.model, done));
    }
    let started = Instant::now();
    let resumable = !opts.force && dir.join(format!("stage{}_state.ckpt", k + 1)).exists();
    let mut runner = if resumable {
        StageRunner::<Model>::load(dir, k as u8 + 1)?
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nc = init.config().num_classes;
        let lr0 = if k == 0 {
            cfg.lr0
        } else {
            cfg.stage2_lr0.unwrap_or(cfg.lr0)
        };
        StageRunner::new(init.clone(), data, plan.loss_spec(nc, cfg)?, cfg, k as u8 + 1, lr0)?
    };
    let previous: f64 = if resumable {
        read_json::<f64>(&dir.join("elapsed.json")).unwrap_or(0.0)
    } else {
        0.0
    };
    while !runner.is_done() {
        let rec = runner.run_epoch(data)?;
        runner.save(dir)?;
        write_json(
            &dir.join("elapsed.json"),
            &(previous + started.elapsed().as_secs_f64()),
        )?;
        if opts.verbose {
            eprintln!(
                "  stage {} epoch {} lr {:.3e} loss {:.6}",
                rec.stage, rec.epoch, rec.lr, rec.loss
            );
        }
    }
    let (best, history) = runner.finish();
    let done = StageDone {
        history,
        wall_time_s: previous + started.elapsed().as_secs_f64(),
    };
    Checkpoint::new(best.clone(), stage_tag(k)).save(&best_path)?;
    write_json(&done_path, &done)?;
    Ok((best, done))
}

/// Loads the train split for one augmentation/enhancement combination.
fn train_set(
    grid: &ExperimentGrid,
    manifest: &DatasetManifest,
    cell: &Cell,
) -> Result<ManifestSet> {
    let m = augment(manifest, cell.augmentation)?;
    ManifestSet::new(
        &m,
        Split::Train,
        grid.config.normalization,
        cell.enhancement.then(|| grid.config.enhance.clone()),
    )
}

fn test_set(
    grid: &ExperimentGrid,
    manifest: &DatasetManifest,
    enhancement: bool,
) -> Result<Vec<(String, Sample)>> {
    let mut test = manifest.load_split(Split::Test, grid.config.normalization)?;
    if enhancement {
        for (_, s) in &mut test {
            s.image = enhance(&s.image, &grid.config.enhance)?;
        }
    }
    Ok(test)
}

/// Directory of a cell's outputs under a grid run directory.
pub fn cell_dir(out_dir: &Path, cell: &str) -> PathBuf {
    out_dir.join("cells").join(cell)
}

fn run_cell(
    grid: &ExperimentGrid,
    cell: &Cell,
    data: &dyn TrainSet,
    test: &[(String, Sample)],
    manifest_hash: &str,
    out_dir: &Path,
    opts: &GridOptions,
) -> Result<ResultRow> {
    let dir = cell_dir(out_dir, &cell.name());
    let mcfg = grid.model_config(cell);
    let tcfg = grid.train_config(cell);
    let mut model = Model::build(&mcfg, cell.seed)?;
    let mut history = TrainHistory::default();
    let mut stage_models = vec![];
    let mut wall = 0.0;
    for (k, plan) in cell.recipe.stages().iter().enumerate() {
        let key = grid.stage_key(cell, manifest_hash, k);
        let sdir = out_dir.join("stages").join(&key[..16]);
        if opts.verbose {
            eprintln!("{}: stage {} ({})", cell.name(), k + 1, &key[..16]);
        }
        let (best, done) = run_cached_stage(&sdir, &model, data, plan, &tcfg, k, opts)?;
        history.extend(done.history);
        wall += done.wall_time_s;
        stage_models.push(best.clone());
        model = best;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let last = stage_models.len() - 1;
    Checkpoint::new(model.clone(), stage_tag(last)).save(dir.join("model.ckpt"))?;
    let stage1 = (last > 0).then(|| &stage_models[0]);
    if let Some(s1) = stage1 {
        Checkpoint::new(s1.clone(), StageTag::Stage1).save(dir.join("stage1.ckpt"))?;
    }
    history.write_csv(&dir.join("history.csv"))?;
    let (mut row, report) = evaluate_row(
        cell,
        grid.cell_hash(cell, manifest_hash),
        &model,
        stage1.map(|m| m as &dyn Segmenter),
        test,
    )?;
    report.write_csv(&dir.join("iou.csv"))?;
    report.write_summary_json(&dir.join("iou_summary.json"))?;
    row.wall_time_s = wall;
    Ok(row)
}

/// Trains and evaluates every cell. Cells with a stored result of the same
/// hash are skipped unless forced; a failing cell becomes a failed row and the
/// grid carries on. Writes `results.csv` and `results.json` into `out_dir`.
pub fn run_grid(
    grid: &ExperimentGrid,
    manifest: &DatasetManifest,
    out_dir: &Path,
    opts: &GridOptions,
) -> Result<GridResults> {
    grid.config.validate()?;
    let manifest_hash = manifest.content_hash();
    let mut results = GridResults::default();
    let mut data: Option<((AugmentScheme, bool), ManifestSet)> = None;
    let mut test: Option<(bool, Vec<(String, Sample)>)> = None;
    let mut cells = grid.cells();
    // group cells sharing a training set
    cells.sort_by_key(|c| (aug_code(c.augmentation), c.enhancement, c.name()));
    for cell in &cells {
        let name = cell.name();
        let hash = grid.cell_hash(cell, &manifest_hash);
        let result_path = cell_dir(out_dir, &name).join("result.json");
        if !opts.force && result_path.exists() {
            if let Ok(row) = read_json::<ResultRow>(&result_path) {
                if row.hash == hash && row.is_ok() {
                    results.rows.push(row);
                    continue;
                }
            }
        }
        let outcome = (|| -> Result<ResultRow> {
            let key = (cell.augmentation, cell.enhancement);
            if data.as_ref().is_none_or(|(k, _)| *k != key) {
                data = Some((key, train_set(grid, manifest, cell)?));
            }
            if test.as_ref().is_none_or(|(e, _)| *e != cell.enhancement) {
                test = Some((cell.enhancement, test_set(grid, manifest, cell.enhancement)?));
            }
            let train = &data.as_ref().unwrap().1;
            let test = &test.as_ref().unwrap().1;
            run_cell(grid, cell, train, test, &manifest_hash, out_dir, opts)
        })();
        let row = outcome.unwrap_or_else(|e| ResultRow {
            error: Some(e.to_string()),
            ..ResultRow::new(cell, hash)
        });
        write_json(&result_path, &row)?;
        results.rows.push(row);
    }
    results.rows.sort_by(|a, b| a.cell.cmp(&b.cell));
    results.write_csv(&out_dir.join("results.csv"))?;
    write_json(&out_dir.join("results.json"), &results.rows)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GridAxes;
    use crate::metrics::OracleSegmenter;
    use crate::synth::{write_dataset, SceneConfig, SplitRule};
    use crate::types::{normalize_image, LabelMap};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.scene = SceneConfig {
            n_setups: 3,
            view_angles: vec![-30.0, 50.0],
            ..SceneConfig::desk()
        };
        cfg.split = SplitRule::Count { test_setups: 1 };
        cfg.model = ModelConfig {
            base_channels: 2,
            ..ModelConfig::desk(1)
        };
        cfg.train.max_epochs = 2;
        cfg.grid = GridAxes {
            n_blocks: vec![1],
            methods: vec![MethodVariant::Ewf, MethodVariant::EwOnly],
            weights: vec![1.0, 50.0],
            seeds: vec![3],
            ..GridAxes::default()
        };
        cfg
    }

    #[test]
    fn cell_names_encode_axes() {
        let grid = ExperimentGrid::new(ExperimentConfig::desk()).unwrap();
        let cells = grid.cells();
        assert_eq!(cells.len(), 3 * (5 + 5) * 3);
        let names: Vec<String> = cells.iter().map(Cell::name).collect();
        assert!(names.contains(&"b2_aug-none_enh-off_EWF_s1".to_string()));
        assert!(names.contains(&"b3_aug-none_enh-off_WCE500_s2".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn oracle_row_is_all_ones() {
        let labels = LabelMap::new(4, 1, 6, vec![0, 1, 2, 3]).unwrap();
        let img = crate::types::GrayImage::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let test = vec![(
            "x".to_string(),
            Sample {
                image: normalize_image(&img).unwrap(),
                labels: labels.clone(),
            },
        )];
        let oracle = OracleSegmenter {
            labels: [("x".to_string(), labels)].into(),
        };
        let cell = Cell {
            n_blocks: 1,
            augmentation: AugmentScheme::None,
            enhancement: false,
            recipe: Recipe::Method(MethodVariant::Ewf),
            seed: 0,
        };
        let (row, _) = evaluate_row(&cell, "h".into(), &oracle, None, &test).unwrap();
        assert!(row.per_class_miou.iter().all(|&v| v == 1.0));
        assert_eq!(row.overall_miou, Some(1.0));
    }

    #[test]
    fn grid_runs_shares_stages_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = write_dataset(&cfg.scene, &cfg.split, &dir.path().join("data")).unwrap();
        let grid = ExperimentGrid::new(cfg).unwrap();
        let out = dir.path().join("run");
        let opts = GridOptions::default();
        let r = run_grid(&grid, &manifest, &out, &opts).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.failures(), 0);
        let row = |n: &str| r.row(&format!("b1_aug-none_enh-off_{n}_s3")).unwrap().clone();
        // EW_ONLY, WCE1 and the first stage of EWF are one training
        assert_eq!(row("EW_ONLY").per_class_miou, row("WCE1").per_class_miou);
        assert_eq!(
            row("EWF").stage1_per_class_miou.as_ref(),
            Some(&row("EW_ONLY").per_class_miou)
        );
        assert_eq!(std::fs::read_dir(out.join("stages")).unwrap().count(), 3);
        let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);

        // a second run reuses results; deleting a cell reproduces it exactly
        std::fs::remove_dir_all(cell_dir(&out, "b1_aug-none_enh-off_EWF_s3")).unwrap();
        let again = run_grid(&grid, &manifest, &out, &opts).unwrap();
        assert_eq!(
            again.rows.iter().map(|r| (&r.cell, &r.per_class_miou)).collect::<Vec<_>>(),
            r.rows.iter().map(|r| (&r.cell, &r.per_class_miou)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn failing_cell_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.grid.methods = vec![];
        cfg.grid.weights = vec![1.0];
        cfg.train.lr0 = 1e12;
        cfg.train.dropout = false;
        cfg.train.max_epochs = 6;
        let manifest = write_dataset(&cfg.scene, &cfg.split, &dir.path().join("data")).unwrap();
        let grid = ExperimentGrid::new(cfg).unwrap();
        let r = run_grid(&grid, &manifest, &dir.path().join("run"), &GridOptions::default()).unwrap();
        assert_eq!(r.failures(), 1);
        assert!(r.rows[0].error.as_ref().unwrap().contains("diverged"));
        let csv = std::fs::read_to_string(dir.path().join("run/results.csv")).unwrap();
        assert!(csv.contains("failed"));
    }
}
