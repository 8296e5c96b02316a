//! Command-line front end. Every command reads one [`RunConfig`] and writes
//! its artifacts under `paths.run_dir` (or `paths.data_dir` for `synth`).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{Preset, RunConfig};
use crate::error::{Error, Result};
use crate::explain::{
    attention_saliency, compare_maps, cube_intersects, mean_grid, occlusion_sweep, SaliencyGrid,
};
use crate::fusion::{FusionStrategy, TriameseMlpConfig};
use crate::metrics::MetricsReport;
use crate::training::{evaluate, load_split, read_epoch_log, write_epoch_log, Evaluation, Sample, Trainer};
use crate::volume::{generate_synthetic_dataset, load_volume, DatasetManifest, Split};

#[derive(Debug, Parser)]
#[command(name = "triamese", version, about = "Tri-view transformer age regression on 3D volumes")]
pub struct Cli {
    /// TOML run configuration, layered over its `preset`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run every batch and sweep on one thread.
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Train a model on the train split, validating each epoch.
    Train {
        /// Continue from `last.ckpt` in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Attention saliency for one volume.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Volume header; defaults to the first test volume.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Occlusion sweep over one split, compared against attention.
    Occlude {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every fusion strategy and MLP depth.
    Ablate,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

/// Runs a parsed command and returns what it would print.
pub fn execute(cli: &Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match &cli.command {
        Command::Synth => synth(&cfg),
        Command::Train { resume } => train(&cfg, *resume, cli.serial),
        Command::Eval { checkpoint, split } => eval(&cfg, checkpoint.as_deref(), split, cli.serial),
        Command::Explain { checkpoint, input } => explain(&cfg, checkpoint.as_deref(), input.as_deref()),
        Command::Occlude { checkpoint, split } => occlude(&cfg, checkpoint.as_deref(), split, cli.serial),
        Command::Ablate => ablate(&cfg, cli.serial),
    }
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_samples(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(cfg.manifest_path())?;
    load_split(&manifest, split)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load(p),
        None => Checkpoint::load(cfg.paths.run_dir.join("best.ckpt")),
    }
}

fn synth(cfg: &RunConfig) -> Result<String> {
    let dataset = generate_synthetic_dataset(&cfg.synth)?;
    dataset.write(&cfg.paths.data_dir)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| dataset.manifest.split(s).len());
    Ok(format!(
        "wrote {} volumes to {} (train {}, val {}, test {})\n",
        dataset.volumes.len(),
        cfg.paths.data_dir.display(),
        counts[0],
        counts[1],
        counts[2]
    ))
}

fn train(cfg: &RunConfig, resume: bool, serial: bool) -> Result<String> {
    let run_dir = &cfg.paths.run_dir;
    create_dir(run_dir)?;
    let train = load_samples(cfg, Split::Train)?;
    let val = load_samples(cfg, Split::Val)?;
    let log_path = run_dir.join("train_log.csv");
    let mut trainer = if resume {
        let last = Checkpoint::load(run_dir.join("last.ckpt"))?;
        let mut t = Trainer::resume(last, train, val)?;
        t.config.epochs = cfg.train.epochs;
        t.log = read_epoch_log(&log_path)?;
        t.log.truncate(t.epoch);
        let best_path = run_dir.join("best.ckpt");
        if best_path.exists() {
            let mut best = Checkpoint::load(best_path)?;
            best.train.epochs = cfg.train.epochs;
            t.best = Some(best);
        }
        t
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone(), train, val)?
    }
    .with_serial(serial);
    trainer.run()?;

    let last = trainer.checkpoint();
    last.save(run_dir.join("last.ckpt"))?;
    trainer.best.as_ref().unwrap_or(&last).save(run_dir.join("best.ckpt"))?;
    write_epoch_log(&trainer.log, &log_path)?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    let final_row = trainer.log.last();
    Ok(format!(
        "trained {} epochs; best val MAE {}; final train MSE {}\n",
        trainer.epoch,
        trainer.best_val_mae.map_or("n/a".into(), |m| format!("{m:.4}")),
        final_row.map_or("n/a".into(), |r| format!("{:.4}", r.train_mse)),
    ))
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str, serial: bool) -> Result<String> {
    let split = parse_split(split)?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let samples = load_samples(cfg, split)?;
    let evaluation = evaluate(&ckpt.model, &samples, serial)?;
    create_dir(&cfg.paths.run_dir)?;
    let json = evaluation.report.to_json()?;
    write_text(&cfg.paths.run_dir.join(format!("eval_{}.json", split.name())), &json)?;
    evaluation.write_predictions(cfg.paths.run_dir.join(format!("predictions_{}.csv", split.name())))?;
    Ok(json)
}

/// Saves raw and minmax copies plus PGM slices of the minmax grid.
fn save_grid_set(dir: &Path, stem: &str, raw: &SaliencyGrid) -> Result<()> {
    raw.save(dir.join(format!("{stem}_raw.json")))?;
    let scaled = raw.minmax();
    scaled.save(dir.join(format!("{stem}_minmax.json")))?;
    scaled.write_pgm_slices(dir.join(format!("{stem}_slices")), stem)
}

fn explain(cfg: &RunConfig, checkpoint: Option<&Path>, input: Option<&Path>) -> Result<String> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let volume = match input {
        Some(p) => load_volume(p)?,
        None => load_samples(cfg, Split::Test)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Contract("test split is empty".into()))?
            .volume,
    };
    let raw = attention_saliency(&ckpt.model, &volume, cfg.explain.extraction, cfg.explain.combine)?;
    let dir = cfg.paths.run_dir.join("explain");
    create_dir(&dir)?;
    save_grid_set(&dir, "attention", &raw)?;
    let [i, j, k] = raw.argmax();
    Ok(format!("attention argmax voxel ({i}, {j}, {k}); grids in {}\n", dir.display()))
}

fn occlude(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str, serial: bool) -> Result<String> {
    let split = parse_split(split)?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let samples = load_samples(cfg, split)?;
    let (volumes, ages): (Vec<_>, Vec<_>) = samples.into_iter().map(|s| (s.volume, s.age)).unzip();
    let occ = occlusion_sweep(&ckpt.model, &volumes, &ages, &cfg.occlusion, serial)?;
    let attention = volumes
        .iter()
        .map(|v| Ok(attention_saliency(&ckpt.model, v, cfg.explain.extraction, cfg.explain.combine)?.minmax()))
        .collect::<Result<Vec<_>>>()?;
    let attention = mean_grid(&attention)?;

    let dir = cfg.paths.run_dir.join("occlusion");
    create_dir(&dir)?;
    save_grid_set(&dir, "occlusion", &occ.grid)?;
    save_grid_set(&dir, "attention_mean", &attention)?;

    let (start, delta) = occ.top();
    let cube = cfg.occlusion.cube_size;
    let mut out = String::new();
    writeln!(out, "baseline MAE {:.4} over {} volumes", occ.baseline_mae, volumes.len()).unwrap();
    writeln!(
        out,
        "top cube at voxel ({}, {}, {}) size {cube}: ΔMAE {delta:.4}",
        start[0], start[1], start[2]
    )
    .unwrap();
    let hit = cube_intersects(start, cube, cfg.synth.region_offset, cfg.synth.region_size);
    writeln!(out, "top cube intersects planted region: {hit}").unwrap();
    match compare_maps(&attention, &occ.grid) {
        Ok(rho) => writeln!(out, "compare_maps(attention, occlusion) = {rho:.2}").unwrap(),
        Err(e) => writeln!(out, "compare_maps(attention, occlusion) undefined: {e}").unwrap(),
    }
    write_text(&dir.join("summary.txt"), &out)?;
    Ok(out)
}

/// One ablation row: variant name and test metrics.
fn row(name: &str, report: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    format!("{name},{:.6},{},{}\n", report.mae, opt(report.r), opt(report.rp))
}

fn view_report(evaluation: &Evaluation, view: usize) -> Result<MetricsReport> {
    let preds: Vec<f64> = evaluation.predictions.iter().map(|p| p.views[view]).collect();
    let ages: Vec<f64> = evaluation.predictions.iter().map(|p| p.age).collect();
    MetricsReport::compute(&preds, &ages)
}

fn ablate(cfg: &RunConfig, serial: bool) -> Result<String> {
    let train = load_samples(cfg, Split::Train)?;
    let val = load_samples(cfg, Split::Val)?;
    let test = load_samples(cfg, Split::Test)?;
    let fit = |model: crate::model::ModelConfig| -> Result<Evaluation> {
        let outcome = crate::training::train(model, cfg.train.clone(), train.clone(), val.clone(), serial)?;
        evaluate(&outcome.best.model, &test, serial)
    };

    let mut table = String::from("variant,mae,r,rp\n");
    for &fusion in &cfg.ablate.fusions {
        let evaluation = fit(crate::model::ModelConfig {
            fusion,
            ..cfg.model.clone()
        })?;
        let name = match fusion {
            FusionStrategy::Mlp => "triamese_mlp",
            FusionStrategy::Mean => "triamese_mean",
            FusionStrategy::Best => "triamese_best",
            FusionStrategy::FeatureMap => "triamese_map",
        };
        table += &row(name, &evaluation.report);
        if fusion == FusionStrategy::Mean {
            for (v, view) in ["vit_x", "vit_y", "vit_z"].iter().enumerate() {
                table += &row(view, &view_report(&evaluation, v)?);
            }
        }
    }
    for widths in &cfg.ablate.mlp_widths {
        let evaluation = fit(crate::model::ModelConfig {
            fusion: FusionStrategy::Mlp,
            fusion_mlp: TriameseMlpConfig {
                widths: widths.clone(),
                ..cfg.model.fusion_mlp.clone()
            },
            ..cfg.model.clone()
        })?;
        let name = widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        table += &row(&format!("mlp_{name}"), &evaluation.report);
    }
    create_dir(&cfg.paths.run_dir)?;
    write_text(&cfg.paths.run_dir.join("ablation.csv"), &table)?;
    Ok(table)
}
