//! `ptseg` — reproducible point-supervised segmentation runs.
//!
//! Subcommands: `synth` (generate a synthetic dataset), `points` (materialize
//! point annotations), `train`, `eval`, `count`, and `report`. Exit codes:
//! 0 success, 1 runtime/data error, 2 configuration error.

mod config;
mod pipeline;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use ptseg_core::annotations::{points_from_mask, SynthConfig};
use ptseg_core::data::{
    build_split, export_png, load_slices, load_volume, resize_mask_nearest, write_volume,
    ManifestScan, Subset, VolumeManifest,
};
use ptseg_core::metrics::MetricsReport;
use ptseg_core::model::{load_checkpoint, save_checkpoint};
use ptseg_core::trainer::{self, count_eval, train, RunRecord};

use config::RunConfigFile;
use pipeline::{
    annotation_file_name, chunk_sizes, full_report, global_index, load_dataset, mask_to_volume,
    points_rng, quantize_image, read_json, write_json, CheckpointExtras, RunPaths,
};

#[derive(Parser)]
#[command(name = "ptseg", version, about = "Point-supervised segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipse dataset with masks and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of slices.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Square slice size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of scans the slices are grouped into.
        #[arg(long, default_value_t = 1)]
        scans: usize,
        #[arg(long, default_value_t = 1)]
        regions_min: usize,
        #[arg(long, default_value_t = 3)]
        regions_max: usize,
        #[arg(long, default_value_t = 2.5)]
        radius_min: f64,
        #[arg(long, default_value_t = 8.0)]
        radius_max: f64,
        #[arg(long, default_value_t = 1.0)]
        intensity: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Also export each slice as an 8-bit grayscale PNG for inspection.
        #[arg(long)]
        png: bool,
    },
    /// Write point-annotation JSON files for every slice of a dataset.
    Points {
        /// Manifest path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory (default: `points/` beside the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resize masks to this square size before generating points
        /// (0 keeps the stored size). Match the training `target_size`.
        #[arg(long, default_value_t = 0)]
        size: usize,
    },
    /// Train a model from a declarative config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config (and PTSEG_SEED) seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "game-L", default_value_t = 4)]
        game_l: u32,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count and localize regions with a trained checkpoint.
    Count {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "game-L", default_value_t = 4)]
        game_l: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the reports of one or more runs.
    Report {
        /// Run directories (each holding report.json and run_record.json).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV output path.
        #[arg(long, default_value = "report.csv")]
        csv: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ptseg_core::Error>() {
            if matches!(e, ptseg_core::Error::Config { .. }) {
                return 2;
            }
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n,
            seed,
            size,
            scans,
            regions_min,
            regions_max,
            radius_min,
            radius_max,
            intensity,
            noise,
            png,
        } => cmd_synth(
            &out,
            n,
            seed,
            size,
            scans,
            (regions_min, regions_max),
            (radius_min, radius_max),
            intensity,
            noise,
            png,
        ),
        Command::Points { data, seed, out, size } => cmd_points(&data, seed, out.as_deref(), size),
        Command::Train {
            config,
            seed,
            epochs,
            out,
        } => cmd_train(&config, seed, epochs, out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            game_l,
            out,
        } => cmd_eval(&checkpoint, &data, &split, game_l, out.as_deref()),
        Command::Count {
            checkpoint,
            data,
            split,
            game_l,
            out,
        } => cmd_count(&checkpoint, &data, &split, game_l, out.as_deref()),
        Command::Report { runs, csv } => cmd_report(&runs, &csv),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    n: usize,
    seed: u64,
    size: usize,
    scans: usize,
    regions: (usize, usize),
    radius: (f64, f64),
    intensity: f64,
    noise: f64,
    png: bool,
) -> Result<()> {
    let cfg = SynthConfig {
        height: size,
        width: size,
        n_regions_range: regions,
        radius_range: radius,
        intensity,
        noise_level: noise,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if n == 0 {
        eprintln!("warning: generating an empty dataset (--n 0)");
    }

    let samples = ptseg_core::annotations::synth_dataset(seed, n, &cfg)?;
    let scans = scans.max(1);
    let mut manifest_scans = Vec::new();
    let mut cursor = 0usize;
    for (scan_idx, chunk) in chunk_sizes(n, scans).into_iter().enumerate() {
        if chunk == 0 {
            continue;
        }
        let scan_id = format!("scan_{scan_idx:02}");
        let scan_dir = out.join(&scan_id);
        std::fs::create_dir_all(&scan_dir)?;
        let mut slice_paths = Vec::new();
        let mut mask_paths = Vec::new();
        for local in 0..chunk {
            let sample = &samples[cursor];
            cursor += 1;
            let slice_rel = PathBuf::from(&scan_id).join(format!("slice_{local:04}.ctv"));
            let mask_rel = PathBuf::from(&scan_id).join(format!("mask_{local:04}.ctv"));
            write_volume(&out.join(&slice_rel), &quantize_image(&sample.image, 1000.0))?;
            write_volume(&out.join(&mask_rel), &mask_to_volume(&sample.mask))?;
            if png {
                let png_rel = PathBuf::from(&scan_id).join(format!("slice_{local:04}.png"));
                export_png(&to_u8_grayscale(&sample.image), &out.join(png_rel))?;
            }
            slice_paths.push(slice_rel);
            mask_paths.push(mask_rel);
        }
        manifest_scans.push(ManifestScan {
            scan_id,
            slices: slice_paths,
            masks: Some(mask_paths),
            hu: false,
        });
    }

    let manifest = VolumeManifest {
        scans: manifest_scans,
        base_dir: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "wrote {} slices in {} scans to {}",
        n,
        manifest.scans.len(),
        out.display()
    );
    Ok(())
}

/// Min-max scales a float grid into `[0, 255]` for PNG inspection.
fn to_u8_grayscale(image: &ndarray::Array2<f64>) -> ndarray::Array2<u8> {
    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image.mapv(|v| (255.0 * (v - lo) / span).round() as u8)
}

fn cmd_points(data: &Path, seed: u64, out: Option<&Path>, size: usize) -> Result<()> {
    let manifest = VolumeManifest::load(data)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.base_dir.join("points"));
    std::fs::create_dir_all(&out_dir)?;

    let mut total_fg = 0usize;
    let mut total_bg = 0usize;
    let mut files = 0usize;
    for (scan_idx, scan) in manifest.scans.iter().enumerate() {
        let masks = scan.masks.as_ref().ok_or_else(|| {
            anyhow!("scan `{}` has no masks; cannot generate point annotations", scan.scan_id)
        })?;
        for (slice_idx, mask_rel) in masks.iter().enumerate() {
            let raw = load_volume(&manifest.resolve(mask_rel))
                .with_context(|| format!("slice {}/{}", scan.scan_id, slice_idx))?;
            let (s, h, w) = raw.dim();
            if s != 1 {
                bail!(
                    "mask file for slice {}/{} holds {s} slices, expected 1",
                    scan.scan_id,
                    slice_idx
                );
            }
            let mut mask =
                ndarray::Array2::from_shape_fn((h, w), |(r, c)| u8::from(raw[[0, r, c]] != 0));
            if size > 0 {
                mask = resize_mask_nearest(&mask, size, size);
            }
            let mut rng = points_rng(seed, global_index(&manifest, scan_idx, slice_idx));
            let ann = points_from_mask(&mask, &mut rng)?;
            total_fg += ann.class_count(1);
            total_bg += ann.class_count(0);
            files += 1;
            write_json(
                &out_dir.join(annotation_file_name(&scan.scan_id, slice_idx)),
                &ann,
            )?;
        }
    }
    println!(
        "wrote {files} annotation files to {}: {total_fg} foreground points, {total_bg} background points",
        out_dir.display()
    );
    Ok(())
}

/// Seed resolution and whether it came from the environment.
fn resolve_seed(cfg_seed: u64, flag: Option<u64>) -> Result<(u64, String)> {
    if let Some(s) = flag {
        return Ok((s, "flag".into()));
    }
    match std::env::var("PTSEG_SEED") {
        Ok(text) => {
            let s = text
                .parse::<u64>()
                .with_context(|| format!("PTSEG_SEED=`{text}` is not a u64"))?;
            Ok((s, "env".into()))
        }
        Err(_) => Ok((cfg_seed, "config".into())),
    }
}

/// run_record.json contents: the trainer record plus seed provenance.
#[derive(serde::Serialize, serde::Deserialize)]
struct RunArtifact {
    seed: u64,
    seed_source: String,
    record: RunRecord,
}

fn cmd_train(
    config_path: &Path,
    seed_flag: Option<u64>,
    epochs_flag: Option<usize>,
    out_flag: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    let (seed, seed_source) = resolve_seed(cfg.seed, seed_flag)?;
    let out_dir = out_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let manifest = VolumeManifest::load(&cfg.data.manifest)?;
    let preprocess = cfg.preprocess_config();
    let dataset = load_dataset(
        &manifest,
        &cfg.data.split,
        &preprocess,
        seed,
        cfg.data.annotations.as_deref(),
    )?;
    let mut train_cfg = cfg.train_config(seed);
    if let Some(e) = epochs_flag {
        train_cfg.epochs = e;
    }

    eprintln!(
        "training loss={} on {} train / {} val slices for {} epochs",
        train_cfg.loss.name(),
        dataset.train.len(),
        dataset.val.len(),
        train_cfg.epochs
    );
    let (best, record) = train(&train_cfg, &dataset.train, &dataset.val)?;

    let paths = RunPaths::new(&out_dir);
    trainer::write_run_log(&paths.run_log, &record.epochs)?;
    let extras = CheckpointExtras {
        preprocess,
        split: cfg.data.split.clone(),
        loss: train_cfg.loss.name().to_string(),
    };
    save_checkpoint(&best, &serde_json::to_value(&extras)?, &paths.checkpoint)?;
    write_json(
        &paths.run_record,
        &RunArtifact {
            seed,
            seed_source,
            record: record.clone(),
        },
    )?;

    if dataset.test.is_empty() {
        eprintln!("warning: empty test split, skipping report.json");
    } else {
        let report = full_report(&best, &dataset.test, 4)?;
        write_json(&paths.report, &report)?;
        println!(
            "{:<16} dice={:.4} iou={:.4} ppv={:.4} sens={:.4} spec={:.4}",
            train_cfg.loss.name(),
            report.dice,
            report.iou,
            report.ppv,
            report.sensitivity,
            report.specificity
        );
    }
    println!(
        "best epoch {} (val dice {:.4}); artifacts in {}",
        record.best_epoch,
        record.best_val_dice,
        out_dir.display()
    );
    Ok(())
}

fn load_split_slices(
    checkpoint: &Path,
    data: &Path,
    split_name: &str,
) -> Result<(ptseg_core::model::NetworkParams, Vec<ptseg_core::data::Slice>)> {
    let (params, extras_json) = load_checkpoint(checkpoint)?;
    let extras: CheckpointExtras = serde_json::from_value(extras_json)
        .context("checkpoint extras missing preprocessing metadata")?;
    let manifest = VolumeManifest::load(data)?;
    let split = build_split(&manifest, &extras.split)?;
    let subset: Subset = split_name.parse()?;
    let slices = load_slices(&manifest, &split, subset, &extras.preprocess)?;
    if slices.is_empty() {
        bail!("split `{split_name}` is empty for this manifest");
    }
    Ok((params, slices))
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split_name: &str,
    game_l: u32,
    out: Option<&Path>,
) -> Result<()> {
    let (params, slices) = load_split_slices(checkpoint, data, split_name)?;
    let report = full_report(&params, &slices, game_l)?;
    println!(
        "split={split_name} dice={:.4} iou={:.4} ppv={:.4} sens={:.4} spec={:.4} mae={:.4}",
        report.dice, report.iou, report.ppv, report.sensitivity, report.specificity, report.mae
    );
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_count(
    checkpoint: &Path,
    data: &Path,
    split_name: &str,
    game_l: u32,
    out: Option<&Path>,
) -> Result<()> {
    let (params, slices) = load_split_slices(checkpoint, data, split_name)?;
    let counts = count_eval(&params, &slices, game_l)?;
    println!(
        "split={split_name} mae={:.4} game(L={game_l})={:.4}",
        counts.mae, counts.game
    );
    if let Some(path) = out {
        write_json(path, &counts)?;
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], csv: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let report: MetricsReport = read_json(&dir.join("report.json"))?;
        let artifact: RunArtifact = read_json(&dir.join("run_record.json"))?;
        rows.push((artifact.record.config.loss.name().to_string(), report));
    }

    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "loss", "dice", "iou", "ppv", "sens.", "spec."
    );
    let mut csv_text = String::from("loss,dice,iou,ppv,sensitivity,specificity\n");
    for (loss, r) in &rows {
        println!(
            "{loss:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.dice, r.iou, r.ppv, r.sensitivity, r.specificity
        );
        csv_text.push_str(&format!(
            "{loss},{},{},{},{},{}\n",
            r.dice, r.iou, r.ppv, r.sensitivity, r.specificity
        ));
    }
    std::fs::write(csv, csv_text).with_context(|| format!("writing {}", csv.display()))?;
    println!("csv written to {}", csv.display());
    Ok(())
}
