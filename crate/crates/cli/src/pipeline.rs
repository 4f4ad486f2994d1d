//! Shared plumbing between the commands: dataset assembly, point-annotation
//! attachment, and report writing.

use anyhow::{anyhow, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ptseg_core::annotations::{points_from_mask, rasterize_points, PointAnnotation};
use ptseg_core::data::{
    build_split, load_slices, PreprocessConfig, Slice, SplitRule, Subset, VolumeManifest,
};
use ptseg_core::metrics::MetricsReport;
use ptseg_core::model::NetworkParams;
use ptseg_core::seed::derive_seed;
use ptseg_core::trainer::{count_eval, evaluate};

/// Seed stream for point-annotation sampling, keyed further by the slice's
/// global index in manifest order. `ptseg points` and on-the-fly generation
/// inside `ptseg train` draw from the same streams, so they agree.
const STREAM_POINTS: u64 = 4;

pub fn points_rng(root_seed: u64, global_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(root_seed, STREAM_POINTS), global_index))
}

/// Global slice index of `(scan_idx, slice_idx)` in manifest order.
pub fn global_index(manifest: &VolumeManifest, scan_idx: usize, slice_idx: usize) -> u64 {
    let before: usize = manifest.scans[..scan_idx]
        .iter()
        .map(|s| s.slices.len())
        .sum();
    (before + slice_idx) as u64
}

pub fn annotation_file_name(scan_id: &str, slice_index: usize) -> String {
    format!("{scan_id}_{slice_index:04}.json")
}

/// Checkpoint sidecar data: everything evaluation needs to preprocess data
/// the same way training did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointExtras {
    pub preprocess: PreprocessConfig,
    pub split: SplitRule,
    pub loss: String,
}

/// The slices of one subset, preprocessed, with point masks attached to
/// training data.
pub struct LoadedSplit {
    pub train: Vec<Slice>,
    pub val: Vec<Slice>,
    pub test: Vec<Slice>,
}

pub fn load_dataset(
    manifest: &VolumeManifest,
    rule: &SplitRule,
    preprocess: &PreprocessConfig,
    seed: u64,
    annotations_dir: Option<&Path>,
) -> Result<LoadedSplit> {
    let split = build_split(manifest, rule)?;
    let mut out = LoadedSplit {
        train: load_slices(manifest, &split, Subset::Train, preprocess)?,
        val: load_slices(manifest, &split, Subset::Val, preprocess)?,
        test: load_slices(manifest, &split, Subset::Test, preprocess)?,
    };

    // Point supervision is only consumed by the training subset.
    let index_of: BTreeMap<&str, usize> = manifest
        .scans
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scan_id.as_str(), i))
        .collect();
    for slice in &mut out.train {
        let scan_idx = *index_of
            .get(slice.scan_id.as_str())
            .ok_or_else(|| anyhow!("scan `{}` missing from manifest", slice.scan_id))?;
        let ann = match annotations_dir {
            Some(dir) => {
                let path = dir.join(annotation_file_name(&slice.scan_id, slice.slice_index));
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading annotation {}", path.display()))?;
                serde_json::from_str::<PointAnnotation>(&text)
                    .with_context(|| format!("parsing annotation {}", path.display()))?
            }
            None => {
                let mask = slice.full_mask.as_ref().ok_or_else(|| {
                    anyhow!(
                        "slice {}/{} has no mask to derive point annotations from",
                        slice.scan_id,
                        slice.slice_index
                    )
                })?;
                let mut rng = points_rng(seed, global_index(manifest, scan_idx, slice.slice_index));
                points_from_mask(mask, &mut rng)?
            }
        };
        let (h, w, _) = slice.image.dim();
        let mut pmask = rasterize_points(&ann, h, w)?;
        if ann.is_empty() {
            pmask = pmask.into_background_only();
        }
        slice.point_mask = Some(pmask);
    }
    Ok(out)
}

/// Evaluates segmentation and counting metrics over a split and assembles
/// the full report.
pub fn full_report(
    params: &NetworkParams,
    slices: &[Slice],
    game_level: u32,
) -> Result<MetricsReport> {
    let seg = evaluate(params, slices)?;
    let counts0 = count_eval(params, slices, 0)?;
    let counts_l = count_eval(params, slices, game_level)?;
    let mut game_l = BTreeMap::new();
    game_l.insert("0".to_string(), counts0.game);
    game_l.insert(game_level.to_string(), counts_l.game);
    Ok(MetricsReport::from_parts(&seg, counts0.mae, game_l))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Quantizes a float image to the fixed-point i16 representation used by
/// `.ctv` files written from synthetic data.
pub fn quantize_image(image: &Array2<f64>, scale: f64) -> ndarray::Array3<i16> {
    let (h, w) = image.dim();
    ndarray::Array3::from_shape_fn((1, h, w), |(_, r, c)| {
        (image[[r, c]] * scale).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
    })
}

pub fn mask_to_volume(mask: &Array2<u8>) -> ndarray::Array3<i16> {
    let (h, w) = mask.dim();
    ndarray::Array3::from_shape_fn((1, h, w), |(_, r, c)| mask[[r, c]] as i16)
}

/// Splits `n` items into `scans` contiguous chunks, first chunks one larger.
pub fn chunk_sizes(n: usize, scans: usize) -> Vec<usize> {
    if scans == 0 {
        return vec![];
    }
    let base = n / scans;
    let rem = n % scans;
    (0..scans)
        .map(|i| base + usize::from(i < rem))
        .collect()
}

/// Paths of the artifacts a training run writes into its output directory.
pub struct RunPaths {
    pub run_log: PathBuf,
    pub run_record: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> RunPaths {
        RunPaths {
            run_log: dir.join("run_log.jsonl"),
            run_record: dir.join("run_record.json"),
            checkpoint: dir.join("best.ckpt"),
            report: dir.join("report.json"),
        }
    }
}
