//! Dataset ingestion, preprocessing, and split construction.
//!
//! Volumes live in a minimal raw container (`.ctv`): 8-byte magic
//! `CTVOL\0\0\x01`, three little-endian u32 dims (slices, height, width),
//! then little-endian i16 values. A JSON manifest lists per-scan slice and
//! mask files in stable axial order; split construction depends on that
//! order alone, so it is reproducible from the manifest with no filesystem
//! state.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::annotations::PointMask;
use crate::error::{Error, Result};

const CTV_MAGIC: &[u8; 8] = b"CTVOL\x00\x00\x01";

/// Writes a raw i16 volume (slices, H, W).
pub fn write_volume(path: &Path, volume: &Array3<i16>) -> Result<()> {
    let (s, h, w) = volume.dim();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CTV_MAGIC)?;
    for dim in [s, h, w] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in volume.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a `.ctv` volume; round-trips [`write_volume`] bit-exactly.
pub fn load_volume(path: &Path) -> Result<Array3<i16>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;

    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != CTV_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, not a ctv volume".into(),
        });
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut bytes = [0u8; 4];
        read_exact_at(&mut r, &mut bytes, &mut offset)?;
        *d = u32::from_le_bytes(bytes) as usize;
    }
    let [s, h, w] = dims;
    let count = s
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "volume dims overflow".into(),
        })?;

    let mut payload = vec![0u8; count * 2];
    read_exact_at(&mut r, &mut payload, &mut offset)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset,
            message: "trailing bytes after payload".into(),
        });
    }

    let values: Vec<i16> = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    Array3::from_shape_vec((s, h, w), values).map_err(|_| Error::Format {
        offset: 8,
        message: "header dims inconsistent with payload".into(),
    })
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: *offset,
        message: format!("truncated volume: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// One scan's entry in the manifest. Slice files are single-slice `.ctv`
/// volumes in axial order; masks, when present, parallel the slice list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScan {
    pub scan_id: String,
    pub slices: Vec<PathBuf>,
    #[serde(default)]
    pub masks: Option<Vec<PathBuf>>,
    /// True when slice values are Hounsfield units; false for fixed-point
    /// intensities (value / 1000).
    pub hu: bool,
}

/// The dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub scans: Vec<ManifestScan>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl VolumeManifest {
    pub fn load(path: &Path) -> Result<VolumeManifest> {
        let text = std::fs::read_to_string(path)?;
        let mut manifest: VolumeManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for scan in &self.scans {
            if let Some(masks) = &scan.masks {
                if masks.len() != scan.slices.len() {
                    return Err(Error::contract(format!(
                        "scan `{}` has {} slices but {} masks",
                        scan.scan_id,
                        scan.slices.len(),
                        masks.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn total_slices(&self) -> usize {
        self.scans.iter().map(|s| s.slices.len()).sum()
    }
}

/// Which subset a slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::contract(format!("unknown subset `{other}`"))),
        }
    }
}

/// How slices are partitioned into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SplitRule {
    /// Within each scan: the first `floor(train_frac * n)` slices train, the
    /// next `floor(val_frac * n)` validate, the remainder test.
    Mixed { train_frac: f64, val_frac: f64 },
    /// Whole scans: the first `train_scans` train, the next `val_scans`
    /// validate, the remainder test.
    Separate { train_scans: usize, val_scans: usize },
}

impl SplitRule {
    /// Default slice-level protocol: first 45% train, next 5% val, rest test.
    pub fn mixed_default() -> Self {
        SplitRule::Mixed {
            train_frac: 0.45,
            val_frac: 0.05,
        }
    }

    /// Scan-level default for a 9-scan dataset: 5 train / 1 val / rest test.
    pub fn separate_default_b() -> Self {
        SplitRule::Separate {
            train_scans: 5,
            val_scans: 1,
        }
    }

    /// Scan-level default for a 20-scan dataset: 15 train / 1 val / rest test.
    pub fn separate_default_c() -> Self {
        SplitRule::Separate {
            train_scans: 15,
            val_scans: 1,
        }
    }
}

/// The computed assignment: the rule that produced it plus one subset per
/// (scan index, slice index), in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub rule: SplitRule,
    pub assignments: Vec<(usize, usize, Subset)>,
}

impl SplitSpec {
    pub fn count(&self, subset: Subset) -> usize {
        self.assignments.iter().filter(|(_, _, s)| *s == subset).count()
    }

    pub fn subset_slices(&self, subset: Subset) -> Vec<(usize, usize)> {
        self.assignments
            .iter()
            .filter(|(_, _, s)| *s == subset)
            .map(|&(scan, slice, _)| (scan, slice))
            .collect()
    }
}

/// Builds the slice assignment for a manifest under a split rule.
pub fn build_split(manifest: &VolumeManifest, rule: &SplitRule) -> Result<SplitSpec> {
    let mut assignments = Vec::with_capacity(manifest.total_slices());
    match *rule {
        SplitRule::Mixed {
            train_frac,
            val_frac,
        } => {
            if !(0.0..=1.0).contains(&train_frac)
                || !(0.0..=1.0).contains(&val_frac)
                || train_frac + val_frac > 1.0
            {
                return Err(Error::contract("mixed split fractions must lie in [0, 1]"));
            }
            for (si, scan) in manifest.scans.iter().enumerate() {
                let n = scan.slices.len();
                let n_train = (train_frac * n as f64).floor() as usize;
                let n_val = (val_frac * n as f64).floor() as usize;
                for i in 0..n {
                    let subset = if i < n_train {
                        Subset::Train
                    } else if i < n_train + n_val {
                        Subset::Val
                    } else {
                        Subset::Test
                    };
                    assignments.push((si, i, subset));
                }
            }
        }
        SplitRule::Separate {
            train_scans,
            val_scans,
        } => {
            if manifest.scans.len() < train_scans + val_scans + 1 {
                return Err(Error::contract(format!(
                    "separate split needs at least {} scans, manifest has {}",
                    train_scans + val_scans + 1,
                    manifest.scans.len()
                )));
            }
            for (si, scan) in manifest.scans.iter().enumerate() {
                let subset = if si < train_scans {
                    Subset::Train
                } else if si < train_scans + val_scans {
                    Subset::Val
                } else {
                    Subset::Test
                };
                for i in 0..scan.slices.len() {
                    assignments.push((si, i, subset));
                }
            }
        }
    }
    Ok(SplitSpec {
        rule: rule.clone(),
        assignments,
    })
}

/// Clips Hounsfield values to `[low, high]` and affinely maps that window to
/// `[0, 255]`, rounding half up.
pub fn hu_window_to_u8(raw: &Array2<i16>, window: (i32, i32)) -> Result<Array2<u8>> {
    let (low, high) = window;
    if low >= high {
        return Err(Error::contract(format!(
            "window low {low} must be below high {high}"
        )));
    }
    let span = (high - low) as f64;
    Ok(raw.mapv(|v| {
        let clipped = (v as i32).clamp(low, high);
        ((clipped - low) as f64 * 255.0 / span).round() as u8
    }))
}

/// Per-channel normalization statistics applied after channel replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormStats {
    /// Standard 3-channel natural-image statistics.
    pub fn imagenet() -> Self {
        NormStats {
            means: vec![0.485, 0.456, 0.406],
            stds: vec![0.229, 0.224, 0.225],
        }
    }

    /// Identity normalization for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        NormStats {
            means: vec![0.0; channels],
            stds: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.stds.len() {
            return Err(Error::contract(
                "normalization means and stds must be non-empty and equal length",
            ));
        }
        if self.stds.iter().any(|&s| s <= 0.0) {
            return Err(Error::contract("normalization stds must be positive"));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers. Identity when the size matches.
pub fn resize_bilinear(image: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    if (h, w) == (th, tw) {
        return image.clone();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        image[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + image[[y0, x1]] * (1.0 - dy) * dx
            + image[[y1, x0]] * dy * (1.0 - dx)
            + image[[y1, x1]] * dy * dx
    })
}

/// Nearest-neighbor resize for label grids; never invents label values.
pub fn resize_mask_nearest(mask: &Array2<u8>, th: usize, tw: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (th, tw) {
        return mask.clone();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let sr = (((r as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[sr, sc]]
    })
}

/// Resizes a `[0, 255]` grid to `target x target`, scales to `[0, 1]`,
/// replicates channels, and standardizes with `stats`.
pub fn preprocess_u8(u8grid: &Array2<u8>, target: usize, stats: &NormStats) -> Result<Array3<f64>> {
    if target == 0 {
        return Err(Error::contract("target size must be positive"));
    }
    stats.validate()?;
    let float = u8grid.mapv(|v| v as f64 / 255.0);
    Ok(standardize(&resize_bilinear(&float, target, target), stats))
}

/// Resizes an already-scaled float grid and standardizes it with `stats`.
pub fn preprocess_float(
    image: &Array2<f64>,
    target: usize,
    stats: &NormStats,
) -> Result<Array3<f64>> {
    if target == 0 {
        return Err(Error::contract("target size must be positive"));
    }
    stats.validate()?;
    Ok(standardize(&resize_bilinear(image, target, target), stats))
}

fn standardize(image: &Array2<f64>, stats: &NormStats) -> Array3<f64> {
    let (h, w) = image.dim();
    let ch = stats.channels();
    Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
        (image[[r, c]] - stats.means[k]) / stats.stds[k]
    })
}

/// One preprocessed slice with whatever labels it carries.
#[derive(Debug, Clone)]
pub struct Slice {
    pub image: Array3<f64>,
    pub full_mask: Option<Array2<u8>>,
    pub point_mask: Option<PointMask>,
    pub scan_id: String,
    pub slice_index: usize,
}

/// Preprocessing parameters recorded alongside checkpoints so evaluation
/// matches training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Window applied when a scan is flagged `hu`.
    pub hu_window: (i32, i32),
    pub stats: NormStats,
    /// Scale for fixed-point (non-HU) volumes: stored value / scale.
    pub fixed_point_scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 352,
            hu_window: (-1000, 400),
            stats: NormStats::imagenet(),
            fixed_point_scale: 1000.0,
        }
    }
}

/// Loads and preprocesses every slice of `subset` in manifest order.
/// Point masks are left unset; the caller attaches them.
pub fn load_slices(
    manifest: &VolumeManifest,
    split: &SplitSpec,
    subset: Subset,
    cfg: &PreprocessConfig,
) -> Result<Vec<Slice>> {
    let mut out = Vec::new();
    for (scan_idx, slice_idx) in split.subset_slices(subset) {
        let scan = &manifest.scans[scan_idx];
        let raw = load_volume(&manifest.resolve(&scan.slices[slice_idx]))?;
        let (s, h, w) = raw.dim();
        if s != 1 {
            return Err(Error::contract(format!(
                "slice file {:?} holds {s} slices, expected 1",
                scan.slices[slice_idx]
            )));
        }
        let plane = Array2::from_shape_fn((h, w), |(r, c)| raw[[0, r, c]]);
        let image = if scan.hu {
            let windowed = hu_window_to_u8(&plane, cfg.hu_window)?;
            preprocess_u8(&windowed, cfg.target_size, &cfg.stats)?
        } else {
            let float = plane.mapv(|v| v as f64 / cfg.fixed_point_scale);
            preprocess_float(&float, cfg.target_size, &cfg.stats)?
        };
        let full_mask = match &scan.masks {
            Some(masks) => {
                let mraw = load_volume(&manifest.resolve(&masks[slice_idx]))?;
                let (ms, mh, mw) = mraw.dim();
                if ms != 1 {
                    return Err(Error::contract(format!(
                        "mask file {:?} holds {ms} slices, expected 1",
                        masks[slice_idx]
                    )));
                }
                let mask =
                    Array2::from_shape_fn((mh, mw), |(r, c)| u8::from(mraw[[0, r, c]] != 0));
                Some(resize_mask_nearest(&mask, cfg.target_size, cfg.target_size))
            }
            None => None,
        };
        out.push(Slice {
            image,
            full_mask,
            point_mask: None,
            scan_id: scan.scan_id.clone(),
            slice_index: slice_idx,
        });
    }
    Ok(out)
}

/// Exports a `[0, 255]` grid as a lossless 8-bit grayscale PNG.
pub fn export_png(grid: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = grid.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([grid[[y as usize, x as usize]]])
    });
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("png export failed: {e}"))))?;
    Ok(())
}
