//! Point-level annotation generation and synthetic data.
//!
//! A point annotation marks one pixel per connected foreground region (the
//! pixel with the largest Euclidean distance to the region boundary) plus an
//! equal number of background pixels sampled uniformly without replacement.
//! The squared distance transform is exact (integer-valued), so argmax
//! tie-breaking is deterministic: smallest row, then smallest column.

use ndarray::{Array2, Array3};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, GeometricTransform};

/// Sentinel for pixels that carry no point label.
pub const UNLABELED: i8 = -1;

/// A single annotated pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    /// 0 = background, 1 = infected.
    pub class_id: u8,
}

/// The point labels for one slice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub points: Vec<Point>,
}

impl PointAnnotation {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_count(&self, class_id: u8) -> usize {
        self.points.iter().filter(|p| p.class_id == class_id).count()
    }

    /// Points as `(row, col, class)` tuples, for the geometry module.
    pub fn as_tuples(&self) -> Vec<geometry::ClassPoint> {
        self.points.iter().map(|p| (p.row, p.col, p.class_id)).collect()
    }
}

/// Per-pixel label grid with an [`UNLABELED`] sentinel.
///
/// The labeled-entry set is exactly the rasterized [`PointAnnotation`].
/// `background_only` flags slices whose full mask had no foreground at all;
/// the point loss then treats every pixel as labeled background.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMask {
    pub grid: Array2<i8>,
    pub background_only: bool,
}

impl PointMask {
    pub fn unlabeled(h: usize, w: usize) -> Self {
        PointMask {
            grid: Array2::from_elem((h, w), UNLABELED),
            background_only: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn labeled_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Marks this mask as coming from a slice with an empty foreground mask.
    pub fn into_background_only(mut self) -> Self {
        self.background_only = true;
        self
    }

    /// Applies a geometric transform to the label grid. The flag is carried.
    pub fn transformed(&self, t: GeometricTransform) -> Self {
        PointMask {
            grid: geometry::apply_to_grid(t, &self.grid),
            background_only: self.background_only,
        }
    }
}

/// Connected-component labeling of a binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabeling {
    /// 0 = background, 1..=count = region ids.
    pub label_grid: Array2<u32>,
    pub count: u32,
}

/// Pixel neighborhood used when joining foreground pixels into regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

/// Labels connected foreground regions with contiguous ids `1..=count`.
/// Regions are numbered in row-major order of their first pixel.
pub fn connected_regions(binary: &Array2<u8>, connectivity: Connectivity) -> RegionLabeling {
    let (h, w) = binary.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();

    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };

    for r in 0..h {
        for c in 0..w {
            if binary[[r, c]] == 0 || labels[[r, c]] != 0 {
                continue;
            }
            count += 1;
            labels[[r, c]] = count;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                for &(dr, dc) in offsets {
                    let nr = pr as isize + dr;
                    let nc = pc as isize + dc;
                    if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if binary[[nr, nc]] != 0 && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = count;
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }

    RegionLabeling {
        label_grid: labels,
        count,
    }
}

/// Squared distance assigned to foreground pixels when the grid contains no
/// background at all.
pub const DIST2_UNREACHABLE: i64 = i64::MAX;

/// Exact squared Euclidean distance to the nearest background (zero) pixel.
///
/// Background pixels get distance 0. Uses the separable lower-envelope
/// algorithm, so results are exact integers and argmax comparisons are
/// tie-free in floating point.
pub fn squared_distance_transform(binary: &Array2<u8>) -> Array2<i64> {
    let (h, w) = binary.dim();
    let mut out = Array2::<i64>::zeros((h, w));
    if h == 0 || w == 0 {
        return out;
    }

    // Vertical pass: per column, distance (in rows) to the nearest zero.
    let mut vert = Array2::<i64>::from_elem((h, w), DIST2_UNREACHABLE);
    for c in 0..w {
        let mut last_zero: Option<usize> = None;
        for r in 0..h {
            if binary[[r, c]] == 0 {
                last_zero = Some(r);
                vert[[r, c]] = 0;
            } else if let Some(z) = last_zero {
                vert[[r, c]] = (r - z) as i64;
            }
        }
        last_zero = None;
        for r in (0..h).rev() {
            if binary[[r, c]] == 0 {
                last_zero = Some(r);
            } else if let Some(z) = last_zero {
                let d = (z - r) as i64;
                if vert[[r, c]] == DIST2_UNREACHABLE || d < vert[[r, c]] {
                    vert[[r, c]] = d;
                }
            }
        }
    }

    // Horizontal pass: lower envelope of parabolas f(c') + (c - c')^2 where
    // f is the squared vertical distance.
    let mut v = vec![0usize; w]; // parabola sites
    let mut z = vec![0f64; w + 1]; // envelope boundaries
    for r in 0..h {
        let f = |c: usize| -> Option<i64> {
            let d = vert[[r, c]];
            if d == DIST2_UNREACHABLE {
                None
            } else {
                Some(d * d)
            }
        };

        let finite: Vec<usize> = (0..w).filter(|&c| f(c).is_some()).collect();
        if finite.is_empty() {
            for c in 0..w {
                out[[r, c]] = DIST2_UNREACHABLE;
            }
            continue;
        }

        let mut k = 0usize;
        v[0] = finite[0];
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for &q in finite.iter().skip(1) {
            let fq = f(q).expect("finite site") as f64;
            loop {
                let p = v[k];
                let fp = f(p).expect("finite site") as f64;
                let s = (fq + (q * q) as f64 - fp - (p * p) as f64)
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    if k == 0 {
                        // q dominates everywhere seen so far
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }

        let mut k = 0usize;
        for c in 0..w {
            while z[k + 1] < c as f64 {
                k += 1;
            }
            let p = v[k];
            let dc = c as i64 - p as i64;
            out[[r, c]] = dc * dc + f(p).expect("finite site");
        }
    }

    out
}

/// Generates a point annotation from a full binary mask.
///
/// One class-1 point per 8-connected foreground region (distance-transform
/// argmax, ties broken by smallest row then column), plus as many class-0
/// points sampled uniformly without replacement from the background. An empty
/// mask yields an empty annotation.
pub fn points_from_mask<R: Rng + ?Sized>(
    mask: &Array2<u8>,
    rng: &mut R,
) -> Result<PointAnnotation> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::contract("points_from_mask expects a binary mask"));
    }
    let regions = connected_regions(mask, Connectivity::Eight);
    if regions.count == 0 {
        return Ok(PointAnnotation::default());
    }

    let dt2 = squared_distance_transform(mask);
    let (h, w) = mask.dim();
    let k = regions.count as usize;

    // Row-major scan with strictly-greater updates keeps the earliest maximum,
    // i.e. smallest row then smallest column.
    let mut best: Vec<Option<(i64, usize, usize)>> = vec![None; k];
    for r in 0..h {
        for c in 0..w {
            let id = regions.label_grid[[r, c]];
            if id == 0 {
                continue;
            }
            let slot = &mut best[(id - 1) as usize];
            let d = dt2[[r, c]];
            match slot {
                Some((bd, _, _)) if *bd >= d => {}
                _ => *slot = Some((d, r, c)),
            }
        }
    }

    let mut points: Vec<Point> = best
        .into_iter()
        .map(|entry| {
            let (_, r, c) = entry.expect("every region has at least one pixel");
            Point {
                row: r,
                col: c,
                class_id: 1,
            }
        })
        .collect();

    let background: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask[[r, c]] == 0)
        .collect();
    if background.len() < k {
        return Err(Error::contract(format!(
            "cannot sample {k} background points without replacement from {} background pixels",
            background.len()
        )));
    }
    for idx in index_sample(rng, background.len(), k) {
        let (r, c) = background[idx];
        points.push(Point {
            row: r,
            col: c,
            class_id: 0,
        });
    }

    Ok(PointAnnotation { points })
}

/// Materializes an annotation as a label grid with the [`UNLABELED`] sentinel.
pub fn rasterize_points(ann: &PointAnnotation, h: usize, w: usize) -> Result<PointMask> {
    let mut mask = PointMask::unlabeled(h, w);
    for p in &ann.points {
        if p.row >= h || p.col >= w {
            return Err(Error::contract(format!(
                "point ({}, {}) outside {h}x{w} grid",
                p.row, p.col
            )));
        }
        if p.class_id > 1 {
            return Err(Error::contract(format!(
                "class id {} out of range for binary annotation",
                p.class_id
            )));
        }
        let cell = &mut mask.grid[[p.row, p.col]];
        if *cell != UNLABELED {
            return Err(Error::contract(format!(
                "duplicate point at ({}, {})",
                p.row, p.col
            )));
        }
        *cell = p.class_id as i8;
    }
    Ok(mask)
}

/// Configuration for the synthetic ellipse generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of ellipses per slice.
    pub n_regions_range: (usize, usize),
    /// Inclusive range for ellipse semi-axes, in pixels.
    pub radius_range: (f64, f64),
    /// Foreground brightness above the zero background.
    pub intensity: f64,
    /// Standard deviation of the i.i.d. Gaussian pixel noise.
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            n_regions_range: (1, 3),
            radius_range: (2.5, 8.0),
            intensity: 1.0,
            noise_level: 0.3,
        }
    }
}

const PLACEMENT_RETRIES: usize = 100;
const ARRANGEMENT_RETRIES: usize = 20;

struct Ellipse {
    cr: usize,
    cc: usize,
    a: f64,
    b: f64,
    sin: f64,
    cos: f64,
    bbox: (usize, usize, usize, usize),
}

/// Draws random filled ellipses on a dark canvas and adds pixel noise.
///
/// Ellipses are placed so their padded bounding boxes stay inside the canvas
/// and do not touch each other, keeping generated regions 8-disjoint. If an
/// arrangement paints itself into a corner, the whole slice layout is
/// resampled a bounded number of times before giving up.
/// Deterministic under a fixed rng state.
pub fn synth_slice<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
) -> Result<(Array2<f64>, Array2<u8>)> {
    let (h, w) = (cfg.height, cfg.width);
    if h == 0 || w == 0 {
        return Err(Error::contract("synthetic canvas must be non-empty"));
    }
    if cfg.n_regions_range.0 > cfg.n_regions_range.1
        || cfg.radius_range.0 > cfg.radius_range.1
        || cfg.radius_range.0 < 1.0
    {
        return Err(Error::contract(
            "synthetic config ranges must be non-degenerate (radii >= 1)",
        ));
    }

    let n = rng.gen_range(cfg.n_regions_range.0..=cfg.n_regions_range.1);
    let mut arrangement: Option<Vec<Ellipse>> = None;
    'attempt: for _ in 0..ARRANGEMENT_RETRIES {
        let mut placed: Vec<Ellipse> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ok = false;
            for _ in 0..PLACEMENT_RETRIES {
                let a = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
                let b = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let (sin, cos) = theta.sin_cos();
                // Half-extents of the rotated ellipse's bounding box.
                let ex = (a * a * cos * cos + b * b * sin * sin).sqrt();
                let ey = (a * a * sin * sin + b * b * cos * cos).sqrt();
                let pad_r = ey.ceil() as usize + 1;
                let pad_c = ex.ceil() as usize + 1;
                if 2 * pad_r + 1 > h || 2 * pad_c + 1 > w {
                    continue;
                }
                let cr = rng.gen_range(pad_r..=(h - 1 - pad_r));
                let cc = rng.gen_range(pad_c..=(w - 1 - pad_c));
                let bbox = (cr - pad_r, cr + pad_r, cc - pad_c, cc + pad_c);
                let overlaps = placed.iter().any(|e| {
                    let (r0, r1, c0, c1) = e.bbox;
                    bbox.0 <= r1 && r0 <= bbox.1 && bbox.2 <= c1 && c0 <= bbox.3
                });
                if overlaps {
                    continue;
                }
                placed.push(Ellipse {
                    cr,
                    cc,
                    a,
                    b,
                    sin,
                    cos,
                    bbox,
                });
                ok = true;
                break;
            }
            if !ok {
                continue 'attempt;
            }
        }
        arrangement = Some(placed);
        break;
    }
    let Some(ellipses) = arrangement else {
        return Err(Error::contract(format!(
            "could not place {n} ellipses after {ARRANGEMENT_RETRIES} layout attempts \
             (canvas {h}x{w}, radii {:?})",
            cfg.radius_range
        )));
    };

    let mut mask = Array2::<u8>::zeros((h, w));
    for e in &ellipses {
        for r in e.bbox.0..=e.bbox.1 {
            for c in e.bbox.2..=e.bbox.3 {
                let dr = r as f64 - e.cr as f64;
                let dc = c as f64 - e.cc as f64;
                let u = (dc * e.cos + dr * e.sin) / e.a;
                let v = (-dc * e.sin + dr * e.cos) / e.b;
                if u * u + v * v <= 1.0 {
                    mask[[r, c]] = 1;
                }
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let image = Array2::from_shape_fn((h, w), |(r, c)| {
        let base = if mask[[r, c]] == 1 { cfg.intensity } else { 0.0 };
        base + cfg.noise_level * noise.sample(rng)
    });

    Ok((image, mask))
}

/// A generated slice plus its mask and point annotation, used by the CLI and
/// by in-memory fixtures.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub annotation: PointAnnotation,
}

/// Generates `n` annotated synthetic slices from one root seed. Slice `i`
/// always sees the same derived seed, so datasets are reproducible
/// regardless of how many slices are requested.
pub fn synth_dataset(root_seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    use rand::SeedableRng;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(root_seed, i as u64));
        let (image, mask) = synth_slice(&mut rng, cfg)?;
        let annotation = points_from_mask(&mask, &mut rng)?;
        out.push(SynthSample {
            image,
            mask,
            annotation,
        });
    }
    Ok(out)
}

/// Replicates a single-channel image into `channels` identical channels,
/// channel-last.
pub fn replicate_channels(image: &Array2<f64>, channels: usize) -> Array3<f64> {
    let (h, w) = image.dim();
    Array3::from_shape_fn((h, w, channels), |(r, c, _)| image[[r, c]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_dt2(mask: &Array2<u8>) -> Array2<i64> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            if mask[[r, c]] == 0 {
                return 0;
            }
            let mut best = DIST2_UNREACHABLE;
            for br in 0..h {
                for bc in 0..w {
                    if mask[[br, bc]] == 0 {
                        let dr = r as i64 - br as i64;
                        let dc = c as i64 - bc as i64;
                        best = best.min(dr * dr + dc * dc);
                    }
                }
            }
            best
        })
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = rng.gen_range(1..14);
            let w = rng.gen_range(1..14);
            let mask = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..2) as u8);
            assert_eq!(squared_distance_transform(&mask), brute_force_dt2(&mask));
        }
    }

    #[test]
    fn centered_square_yields_center_point() {
        let mut mask = Array2::<u8>::zeros((9, 9));
        for r in 2..7 {
            for c in 2..7 {
                mask[[r, c]] = 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ann = points_from_mask(&mask, &mut rng).unwrap();
        let fg: Vec<_> = ann.points.iter().filter(|p| p.class_id == 1).collect();
        assert_eq!(fg.len(), 1);
        assert_eq!((fg[0].row, fg[0].col), (4, 4));
    }

    #[test]
    fn two_regions_two_points_each_class() {
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask[[1, 1]] = 1;
        mask[[1, 2]] = 1;
        mask[[6, 6]] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ann = points_from_mask(&mask, &mut rng).unwrap();
        assert_eq!(ann.class_count(1), 2);
        assert_eq!(ann.class_count(0), 2);
        let labeling = connected_regions(&mask, Connectivity::Eight);
        let mut seen = std::collections::HashSet::new();
        for p in ann.points.iter().filter(|p| p.class_id == 1) {
            let id = labeling.label_grid[[p.row, p.col]];
            assert!(id > 0, "foreground point must lie inside a region");
            assert!(seen.insert(id), "one point per region");
        }
        for p in ann.points.iter().filter(|p| p.class_id == 0) {
            assert_eq!(mask[[p.row, p.col]], 0);
        }
    }

    #[test]
    fn empty_mask_empty_annotation() {
        let mask = Array2::<u8>::zeros((5, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ann = points_from_mask(&mask, &mut rng).unwrap();
        assert!(ann.is_empty());
    }

    #[test]
    fn background_shortage_is_an_error() {
        let mask = Array2::<u8>::ones((3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(points_from_mask(&mask, &mut rng).is_err());
    }

    #[test]
    fn connectivity_examples() {
        let all0 = Array2::<u8>::zeros((4, 4));
        assert_eq!(connected_regions(&all0, Connectivity::Eight).count, 0);

        let all1 = Array2::<u8>::ones((4, 4));
        assert_eq!(connected_regions(&all1, Connectivity::Eight).count, 1);

        let diag = array![[1u8, 0], [0, 1]];
        assert_eq!(connected_regions(&diag, Connectivity::Eight).count, 1);
        assert_eq!(connected_regions(&diag, Connectivity::Four).count, 2);
    }

    #[test]
    fn rasterize_round_trip_and_errors() {
        let empty = rasterize_points(&PointAnnotation::default(), 3, 3).unwrap();
        assert_eq!(empty.labeled_count(), 0);

        let ann = PointAnnotation {
            points: vec![Point {
                row: 1,
                col: 2,
                class_id: 1,
            }],
        };
        let pm = rasterize_points(&ann, 4, 4).unwrap();
        assert_eq!(pm.labeled_count(), 1);
        assert_eq!(pm.grid[[1, 2]], 1);

        let dup = PointAnnotation {
            points: vec![
                Point {
                    row: 0,
                    col: 0,
                    class_id: 1,
                },
                Point {
                    row: 0,
                    col: 0,
                    class_id: 0,
                },
            ],
        };
        assert!(rasterize_points(&dup, 4, 4).is_err());

        let oob = PointAnnotation {
            points: vec![Point {
                row: 4,
                col: 0,
                class_id: 1,
            }],
        };
        assert!(rasterize_points(&oob, 4, 4).is_err());
    }

    #[test]
    fn synth_determinism_and_empty_case() {
        let cfg = SynthConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let (img_a, mask_a) = synth_slice(&mut a, &cfg).unwrap();
        let (img_b, mask_b) = synth_slice(&mut b, &cfg).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(mask_a, mask_b);

        let empty_cfg = SynthConfig {
            n_regions_range: (0, 0),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, mask) = synth_slice(&mut rng, &empty_cfg).unwrap();
        assert_eq!(mask.sum(), 0);
    }

    #[test]
    fn synth_foreground_fraction_is_sane() {
        let cfg = SynthConfig {
            radius_range: (3.0, 6.0),
            ..SynthConfig::default()
        };
        for i in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (_, mask) = synth_slice(&mut rng, &cfg).unwrap();
            let frac = mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / (64.0 * 64.0);
            assert!(frac > 0.0 && frac < 0.5, "foreground fraction {frac}");
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let cfg = SynthConfig {
            height: 8,
            width: 8,
            radius_range: (10.0, 12.0),
            n_regions_range: (1, 1),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_slice(&mut rng, &cfg).is_err());
    }

    #[test]
    fn distance_argmax_mirrors_under_hflip() {
        // On a symmetric mask the argmax must map to the mirrored argmax.
        let mut mask = Array2::<u8>::zeros((7, 9));
        for r in 2..5 {
            for c in 1..4 {
                mask[[r, c]] = 1;
            }
        }
        let flipped = geometry::apply_to_grid(GeometricTransform::HFlip, &mask);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ann = points_from_mask(&mask, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ann_f = points_from_mask(&flipped, &mut rng).unwrap();
        let p = ann.points.iter().find(|p| p.class_id == 1).unwrap();
        let pf = ann_f.points.iter().find(|p| p.class_id == 1).unwrap();
        let (mr, mc) = GeometricTransform::HFlip.map_point(p.row, p.col, 7, 9);
        assert_eq!((pf.row, pf.col), (mr, mc));
    }
}
