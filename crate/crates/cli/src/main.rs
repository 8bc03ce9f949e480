use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fidseg::config::ExperimentConfig;
use fidseg::experiment::{
    cell_dir, compare_methods, export_centers, plot_per_image_iou, render_overlay, run_grid,
    ExperimentGrid, GridOptions, Recipe,
};
use fidseg::manifest::{DatasetManifest, Split};
use fidseg::metrics::{evaluate_dataset, IoUReport, Segmenter};
use fidseg::pipeline::{augment, enhance, materialize, AugmentScheme};
use fidseg::synth::write_dataset;
use fidseg::trainer::MethodVariant;
use fidseg::unet::Checkpoint;
use fidseg::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fidseg", version, about = "Fiducial-marker segmentation experiments")]
struct Cli {
    /// TOML experiment config; defaults to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the scene, training and grid seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Recompute results that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 128x128 frames, 200/50 split, F0 = 16.
    Desk,
    /// 512x512 frames, 80/78 split, F0 = 64.
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scheme {
    None,
    A,
    B,
}

impl From<Scheme> for AugmentScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::None => AugmentScheme::None,
            Scheme::A => AugmentScheme::SchemeA,
            Scheme::B => AugmentScheme::SchemeB,
        }
    }
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory (or manifest.json).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArg,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Apply percentile rescale + CLAHE before segmenting.
    #[arg(long)]
    enhance: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Derive augmented training frames.
    Augment {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        scheme: Scheme,
        /// Write every derived frame to disk instead of transforming on load.
        #[arg(long)]
        materialize: bool,
    },
    /// Train one recipe.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// EWF, W50, FOCAL_SCRATCH, EW_ONLY or WF50.
        #[arg(long, default_value = "EWF")]
        method: String,
        /// Single-stage weighted cross-entropy with this foreground weight
        /// (replaces --method).
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long, value_enum, default_value = "none")]
        augment: Scheme,
        #[arg(long)]
        enhance: bool,
        /// Print per-epoch progress.
        #[arg(long)]
        verbose: bool,
    },
    /// Run the ablation grid from the config.
    Grid {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        verbose: bool,
    },
    /// Train the five methods and compare per-class IoU.
    Compare {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        verbose: bool,
    },
    /// Per-image IoU of a model on the test split.
    Eval {
        #[command(flatten)]
        args: ModelArgs,
    },
    /// Export predicted marker centres with errors and latency.
    Centers {
        #[command(flatten)]
        args: ModelArgs,
    },
    /// Render ground truth / prediction overlays for test frames.
    Overlay {
        #[command(flatten)]
        args: ModelArgs,
        /// Frame ids; all test frames when omitted.
        #[arg(long)]
        frame: Vec<String>,
        /// Marker class to show; every marker class when omitted.
        #[arg(long)]
        class: Option<u8>,
        /// Crop to the masks' bounding box plus 10 px.
        #[arg(long)]
        crop: bool,
    },
    /// Plot per-image IoU from an IoU CSV.
    Plot {
        #[arg(long)]
        iou: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::Grid { .. } => "grid",
            Command::Compare { .. } => "compare",
            Command::Eval { .. } => "eval",
            Command::Centers { .. } => "centers",
            Command::Overlay { .. } => "overlay",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Files produced by every command run against an output directory.
#[derive(Debug, Default, Serialize, Deserialize)]
struct RunManifest {
    runs: Vec<RunEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunEntry {
    command: String,
    ok: bool,
    files: Vec<PathBuf>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn record_run(out_dir: &Path, entry: RunEntry) -> Result<()> {
    mkdir(out_dir)?;
    let path = out_dir.join("run_manifest.json");
    let mut m: RunManifest = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => RunManifest::default(),
    };
    m.runs.push(entry);
    let text = serde_json::to_vec_pretty(&m).map_err(Error::Json)?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match cli.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Paper => ExperimentConfig::default(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.scene.seed = s;
        cfg.train.seed = s;
        cfg.grid.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Makes every frame path absolute so the manifest can live anywhere.
fn absolutize(m: &mut DatasetManifest) -> Result<()> {
    let root = std::fs::canonicalize(&m.root).map_err(|e| io_err(&m.root, e))?;
    for f in &mut m.frames {
        if f.image_path.is_relative() {
            f.image_path = root.join(&f.image_path);
        }
        if f.label_path.is_relative() {
            f.label_path = root.join(&f.label_path);
        }
    }
    m.root = root;
    Ok(())
}

fn parse_method(s: &str) -> Result<MethodVariant> {
    MethodVariant::ALL
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::InvalidInput(format!("unknown method {s}")))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn test_samples(
    cfg: &ExperimentConfig,
    m: &DatasetManifest,
    enhanced: bool,
) -> Result<Vec<(String, fidseg::types::Sample)>> {
    let mut test = m.load_split(Split::Test, cfg.normalization)?;
    if enhanced {
        for (_, s) in &mut test {
            s.image = enhance(&s.image, &cfg.enhance)?;
        }
    }
    Ok(test)
}

fn print_report(report: &IoUReport) {
    println!("images: {}", report.image_ids.len());
    for (c, (m, s)) in report
        .per_class_miou
        .iter()
        .zip(&report.per_class_std)
        .enumerate()
    {
        println!("class {c}: mIoU {m:.4} (std {s:.4})");
    }
    println!("overall mIoU {:.4}", report.overall_miou);
}

fn run(cli: &Cli, files: &mut Vec<PathBuf>) -> Result<bool> {
    let out = &cli.out_dir;
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => {
            let dir = out.join("data");
            let m = write_dataset(&cfg.scene, &cfg.split, &dir)?;
            files.push(dir.join("manifest.json"));
            files.extend(m.frames.iter().flat_map(|f| [dir.join(&f.image_path), dir.join(&f.label_path)]));
            let cfg_path = out.join("config.toml");
            cfg.save(&cfg_path)?;
            files.push(cfg_path);
            println!(
                "{} train / {} test frames in {}",
                m.count(Split::Train),
                m.count(Split::Test),
                dir.display()
            );
        }
        Command::Augment {
            data,
            scheme,
            materialize: mat,
        } => {
            let mut src = DatasetManifest::load(&data.data)?;
            absolutize(&mut src)?;
            let aug = augment(&src, (*scheme).into())?;
            let dir = out.join("augmented");
            let m = if *mat {
                let m = materialize(&aug, &dir, cfg.normalization)?;
                files.extend(
                    m.frames
                        .iter()
                        .filter(|f| f.provenance.is_some())
                        .map(|f| dir.join(&f.image_path)),
                );
                m
            } else {
                aug
            };
            files.push(m.save(&dir)?);
            println!("{} training frames", m.count(Split::Train));
        }
        Command::Train {
            data,
            method,
            weight,
            blocks,
            augment: scheme,
            enhance: enh,
            verbose,
        } => {
            let manifest = DatasetManifest::load(&data.data)?;
            let mut cfg = cfg.clone();
            let recipe = match weight {
                Some(w) => Recipe::Weighted(*w),
                None => Recipe::Method(parse_method(method)?),
            };
            cfg.grid.n_blocks = vec![blocks.unwrap_or(cfg.model.n_blocks)];
            cfg.grid.augmentation = vec![(*scheme).into()];
            cfg.grid.enhancement = vec![*enh];
            cfg.grid.seeds = vec![cfg.train.seed];
            (cfg.grid.methods, cfg.grid.weights) = match recipe {
                Recipe::Method(m) => (vec![m], vec![]),
                Recipe::Weighted(w) => (vec![], vec![w]),
            };
            let grid = ExperimentGrid::new(cfg)?;
            let opts = GridOptions {
                force: cli.force,
                verbose: *verbose,
            };
            let res = run_grid(&grid, &manifest, out, &opts)?;
            let row = &res.rows[0];
            let dir = cell_dir(out, &row.cell);
            files.extend(["model.ckpt", "history.csv", "iou.csv", "result.json"].map(|f| dir.join(f)));
            match &row.error {
                Some(e) => {
                    eprintln!("{}: {e}", row.cell);
                    return Ok(false);
                }
                None => println!(
                    "{}: overall mIoU {:.4}, foreground mIoU {:.4}",
                    row.cell,
                    row.overall_miou.unwrap_or(f64::NAN),
                    row.foreground_miou.unwrap_or(f64::NAN)
                ),
            }
        }
        Command::Grid { data, verbose } => {
            let manifest = DatasetManifest::load(&data.data)?;
            let grid = ExperimentGrid::new(cfg)?;
            let opts = GridOptions {
                force: cli.force,
                verbose: *verbose,
            };
            let res = run_grid(&grid, &manifest, out, &opts)?;
            files.push(out.join("results.csv"));
            files.push(out.join("results.json"));
            for r in &res.rows {
                match &r.error {
                    None => println!("{} {:.4}", r.cell, r.overall_miou.unwrap_or(f64::NAN)),
                    Some(e) => println!("{} FAILED: {e}", r.cell),
                }
            }
            if res.failures() > 0 {
                eprintln!("{} of {} cells failed", res.failures(), res.rows.len());
                return Ok(false);
            }
        }
        Command::Compare { data, verbose } => {
            let manifest = DatasetManifest::load(&data.data)?;
            let mut cfg = cfg.clone();
            cfg.grid.methods = MethodVariant::ALL.to_vec();
            cfg.grid.weights = vec![];
            let grid = ExperimentGrid::new(cfg)?;
            let opts = GridOptions {
                force: cli.force,
                verbose: *verbose,
            };
            let res = run_grid(&grid, &manifest, out, &opts)?;
            let mut reports = vec![];
            for cell in grid.cells() {
                let path = cell_dir(out, &cell.name()).join("iou.csv");
                if res.row(&cell.name()).is_some_and(|r| r.is_ok()) {
                    reports.push((cell.recipe.label(), IoUReport::read_csv(&path)?));
                }
            }
            let names: Vec<String> = MethodVariant::ALL.iter().map(|m| m.name().to_string()).collect();
            let cmp = compare_methods(&reports, &names)?;
            let dir = out.join("comparison");
            cmp.write(&dir)?;
            files.extend(["comparison.csv", "comparison.json", "comparison.png"].map(|f| dir.join(f)));
            for s in &cmp.stats {
                let cells: Vec<String> = s
                    .mean
                    .iter()
                    .zip(&s.std)
                    .map(|(m, d)| format!("{m:.3}±{d:.3}"))
                    .collect();
                println!("{:<14} {}", s.method, cells.join(" "));
            }
            for a in &cmp.absent {
                println!("{a:<14} absent");
            }
            if res.failures() > 0 {
                return Ok(false);
            }
        }
        Command::Eval { args } => {
            let manifest = DatasetManifest::load(&args.data.data)?;
            let model = load_model(&args.model)?.model;
            let report = evaluate_dataset(&model, test_samples(&cfg, &manifest, args.enhance)?)?;
            let dir = out.join("eval");
            mkdir(&dir)?;
            let (png, csv, json) = (dir.join("iou.png"), dir.join("iou.csv"), dir.join("iou_summary.json"));
            plot_per_image_iou(&report, &png, &csv)?;
            report.write_summary_json(&json)?;
            files.extend([png, csv, json]);
            print_report(&report);
        }
        Command::Centers { args } => {
            let manifest = DatasetManifest::load(&args.data.data)?;
            let model = load_model(&args.model)?.model;
            let dir = out.join("centers");
            mkdir(&dir)?;
            let path = dir.join("centers.csv");
            let enh = args.enhance.then_some(&cfg.enhance);
            let e = export_centers(&model, &manifest, Split::Test, cfg.normalization, enh, &path)?;
            files.push(path);
            files.push(dir.join("latency.csv"));
            println!(
                "{} markers, {} missing, detection rate {:.4}",
                e.summary.records.len(),
                e.summary.missing,
                e.summary.detection_rate
            );
            println!(
                "latency: mean {:.2} ms, max {:.2} ms",
                e.mean_latency_ms, e.max_latency_ms
            );
        }
        Command::Overlay {
            args,
            frame,
            class,
            crop,
        } => {
            let manifest = DatasetManifest::load(&args.data.data)?;
            let model = load_model(&args.model)?.model;
            let dir = out.join("overlays");
            mkdir(&dir)?;
            let test = test_samples(&cfg, &manifest, args.enhance)?;
            let mut done = 0;
            for (id, s) in &test {
                if !frame.is_empty() && !frame.contains(id) {
                    continue;
                }
                let seg = model.segment(id, &s.image)?;
                let keep = |v: u8| match class {
                    Some(c) => v == *c,
                    None => v != 0,
                };
                let gt: Vec<bool> = s.labels.ids().iter().map(|&v| keep(v)).collect();
                let pred: Vec<bool> = seg.ids().iter().map(|&v| keep(v)).collect();
                let img = render_overlay(&s.image, &gt, &pred, *crop)?;
                let path = dir.join(format!("{id}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    source: e,
                })?;
                files.push(path);
                done += 1;
            }
            if let Some(missing) = frame.iter().find(|f| !test.iter().any(|(id, _)| id == *f)) {
                return Err(Error::InvalidInput(format!("no test frame {missing}")));
            }
            println!("{done} overlays in {}", dir.display());
        }
        Command::Plot { iou } => {
            let report = IoUReport::read_csv(iou)?;
            mkdir(out)?;
            let (png, csv) = (out.join("iou.png"), out.join("iou_plot.csv"));
            plot_per_image_iou(&report, &png, &csv)?;
            files.extend([png, csv]);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut files = vec![];
    let outcome = run(&cli, &mut files);
    let ok = matches!(outcome, Ok(true));
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    let entry = RunEntry {
        command: cli.command.name().to_string(),
        ok,
        files,
    };
    if let Err(e) = record_run(&cli.out_dir, entry) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use fidseg::experiment::Cell;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn cell_name_of_train_matches_grid() {
        let c = Cell {
            n_blocks: 2,
            augmentation: AugmentScheme::None,
            enhancement: false,
            recipe: Recipe::Weighted(50.0),
            seed: 1,
        };
        assert_eq!(c.name(), "b2_aug-none_enh-off_WCE50_s1");
    }
}
