//! Segmentation and counting metrics.
//!
//! Segmentation scores are micro-aggregated: TP/FP/FN/TN pixel counts are
//! pooled across the whole evaluation split and the five scores are computed
//! once from the totals. Counting uses per-image region centroids: MAE over
//! region counts and GAME over a `2^L x 2^L` grid of equal cells.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::annotations::{connected_regions, squared_distance_transform, Connectivity};
use crate::error::{Error, Result};

/// Pixel confusion counts accumulated across an evaluation split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTotals {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionTotals {
    /// Adds per-pixel counts for one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::contract(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => self.true_pos += 1,
                (true, false) => self.false_pos += 1,
                (false, true) => self.false_neg += 1,
                (false, false) => self.true_neg += 1,
            }
        }
        Ok(())
    }

    /// Merges partial totals; accumulation is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionTotals) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// The five segmentation scores. Ratios that were 0/0 are reported as 1.0
/// and named in `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub iou: f64,
    pub dice: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name.to_string());
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Computes IoU, Dice, PPV, sensitivity, and specificity from pooled totals.
pub fn scores(totals: &ConfusionTotals) -> SegScores {
    let tp = totals.true_pos;
    let fp = totals.false_pos;
    let fneg = totals.false_neg;
    let tn = totals.true_neg;
    let mut degenerate = Vec::new();
    SegScores {
        iou: ratio(tp, tp + fp + fneg, "iou", &mut degenerate),
        dice: ratio(2 * tp, 2 * tp + fp + fneg, "dice", &mut degenerate),
        ppv: ratio(tp, tp + fp, "ppv", &mut degenerate),
        sensitivity: ratio(tp, tp + fneg, "sensitivity", &mut degenerate),
        specificity: ratio(tn, fp + tn, "specificity", &mut degenerate),
        degenerate,
    }
}

/// Per-image predicted and ground-truth region centroids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub predicted: Vec<(usize, usize)>,
    pub ground_truth: Vec<(usize, usize)>,
}

/// Mean absolute region-count error over images.
pub fn mae_counts(records: &[CountRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("mae_counts needs at least one record"));
    }
    let total: f64 = records
        .iter()
        .map(|r| (r.predicted.len() as f64 - r.ground_truth.len() as f64).abs())
        .sum();
    Ok(total / records.len() as f64)
}

/// Grid average mean absolute error: the image is split into `4^L` equal
/// cells (`2^L x 2^L`); per-cell count errors are summed and averaged over
/// images. A centroid at `(r, c)` belongs to cell `(r*2^L/H, c*2^L/W)`.
pub fn game(records: &[CountRecord], level: u32, h: usize, w: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("game needs at least one record"));
    }
    if level > 15 {
        return Err(Error::contract("game level must be <= 15"));
    }
    let side = 1usize << level;
    let cell_of = |r: usize, c: usize| -> Result<usize> {
        if r >= h || c >= w {
            return Err(Error::contract(format!(
                "centroid ({r}, {c}) outside {h}x{w} image"
            )));
        }
        Ok((r * side / h) * side + c * side / w)
    };

    let mut total = 0.0;
    for rec in records {
        let mut diff: BTreeMap<usize, i64> = BTreeMap::new();
        for &(r, c) in &rec.predicted {
            *diff.entry(cell_of(r, c)?).or_insert(0) += 1;
        }
        for &(r, c) in &rec.ground_truth {
            *diff.entry(cell_of(r, c)?).or_insert(0) -= 1;
        }
        total += diff.values().map(|d| d.unsigned_abs() as f64).sum::<f64>();
    }
    Ok(total / records.len() as f64)
}

/// One localization point per connected region: the distance-transform argmax
/// with the same row-major tie-break as annotation generation.
pub fn centroids_from_mask(binary: &Array2<u8>) -> Vec<(usize, usize)> {
    let regions = connected_regions(binary, Connectivity::Eight);
    if regions.count == 0 {
        return Vec::new();
    }
    let dt2 = squared_distance_transform(binary);
    let (h, w) = binary.dim();
    let mut best: Vec<Option<(i64, usize, usize)>> = vec![None; regions.count as usize];
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
    best.into_iter()
        .map(|e| {
            let (_, r, c) = e.expect("region non-empty");
            (r, c)
        })
        .collect()
}

/// The report emitted after evaluation: fixed key names, one value per
/// metric, GAME keyed by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub dice: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mae: f64,
    #[serde(rename = "game_L")]
    pub game_l: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub fn from_parts(seg: &SegScores, mae: f64, game_l: BTreeMap<String, f64>) -> Self {
        MetricsReport {
            iou: seg.iou,
            dice: seg.dice,
            ppv: seg.ppv,
            sensitivity: seg.sensitivity,
            specificity: seg.specificity,
            mae,
            game_l,
            degenerate: seg.degenerate.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accumulate_examples() {
        let mut t = ConfusionTotals::default();
        let ones = Array2::<u8>::ones((2, 2));
        let zeros = Array2::<u8>::zeros((2, 2));
        t.accumulate(&ones, &ones).unwrap();
        assert_eq!(t.true_pos, 4);
        t.accumulate(&ones, &zeros).unwrap();
        assert_eq!(t.false_pos, 4);

        let mut t = ConfusionTotals::default();
        let pred = array![[1u8, 1], [0, 0]];
        let gt = array![[1u8, 0], [1, 0]];
        t.accumulate(&pred, &gt).unwrap();
        assert_eq!(
            t,
            ConfusionTotals {
                true_pos: 1,
                false_pos: 1,
                false_neg: 1,
                true_neg: 1
            }
        );
        assert_eq!(t.total(), 4);
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut t = ConfusionTotals::default();
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(t.accumulate(&a, &b).is_err());
    }

    #[test]
    fn score_formulas() {
        let t = ConfusionTotals {
            true_pos: 2,
            false_pos: 1,
            false_neg: 1,
            true_neg: 96,
        };
        let s = scores(&t);
        assert!((s.iou - 0.5).abs() < 1e-12);
        assert!((s.dice - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.ppv - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.sensitivity - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.specificity - 96.0 / 97.0).abs() < 1e-12);
        assert!(s.degenerate.is_empty());

        // Dice is 2*IoU/(1+IoU).
        assert!((s.dice - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let t = ConfusionTotals {
            true_pos: 10,
            false_pos: 0,
            false_neg: 0,
            true_neg: 90,
        };
        let s = scores(&t);
        for v in [s.iou, s.dice, s.ppv, s.sensitivity, s.specificity] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_over_zero_is_flagged() {
        let t = ConfusionTotals {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 16,
        };
        let s = scores(&t);
        assert_eq!(s.specificity, 1.0);
        assert!(s.degenerate.contains(&"iou".to_string()));
        assert!(s.degenerate.contains(&"ppv".to_string()));
        assert!(!s.degenerate.contains(&"specificity".to_string()));
    }

    #[test]
    fn specificity_complements_false_positive_rate() {
        let t = ConfusionTotals {
            true_pos: 5,
            false_pos: 7,
            false_neg: 2,
            true_neg: 86,
        };
        let s = scores(&t);
        let fpr = t.false_pos as f64 / (t.false_pos + t.true_neg) as f64;
        assert!((s.specificity + fpr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mae_examples() {
        let rec = |p: usize, g: usize| CountRecord {
            predicted: (0..p).map(|i| (i, 0)).collect(),
            ground_truth: (0..g).map(|i| (i, 1)).collect(),
        };
        assert_eq!(mae_counts(&[rec(2, 3), rec(3, 3)]).unwrap(), 0.5);
        assert_eq!(mae_counts(&[rec(4, 4)]).unwrap(), 0.0);
        assert_eq!(mae_counts(&[rec(0, 4)]).unwrap(), 4.0);
        assert!(mae_counts(&[]).is_err());
    }

    #[test]
    fn game_level_zero_is_mae() {
        let rec = CountRecord {
            predicted: vec![(1, 1), (5, 9)],
            ground_truth: vec![(14, 2)],
        };
        let records = [rec];
        assert_eq!(
            game(&records, 0, 16, 16).unwrap(),
            mae_counts(&records).unwrap()
        );
    }

    #[test]
    fn game_separate_quadrants() {
        let rec = CountRecord {
            predicted: vec![(1, 1)],
            ground_truth: vec![(12, 12)],
        };
        assert_eq!(game(&[rec], 1, 16, 16).unwrap(), 2.0);
    }

    #[test]
    fn game_zero_when_centroids_match() {
        let rec = CountRecord {
            predicted: vec![(3, 3), (9, 12)],
            ground_truth: vec![(3, 3), (9, 12)],
        };
        let records = [rec];
        for level in 0..5 {
            assert_eq!(game(&records, level, 16, 16).unwrap(), 0.0);
        }
    }

    #[test]
    fn game_rejects_out_of_bounds() {
        let rec = CountRecord {
            predicted: vec![(16, 0)],
            ground_truth: vec![],
        };
        assert!(game(&[rec], 1, 16, 16).is_err());
    }

    #[test]
    fn centroid_examples() {
        let empty = Array2::<u8>::zeros((6, 6));
        assert!(centroids_from_mask(&empty).is_empty());

        let mut square = Array2::<u8>::zeros((9, 9));
        for r in 2..7 {
            for c in 2..7 {
                square[[r, c]] = 1;
            }
        }
        assert_eq!(centroids_from_mask(&square), vec![(4, 4)]);
    }

    #[test]
    fn report_json_key_names() {
        let seg = scores(&ConfusionTotals {
            true_pos: 1,
            false_pos: 1,
            false_neg: 1,
            true_neg: 1,
        });
        let mut game_l = BTreeMap::new();
        game_l.insert("0".to_string(), 0.5);
        game_l.insert("4".to_string(), 1.5);
        let report = MetricsReport::from_parts(&seg, 0.5, game_l);
        let json = serde_json::to_value(&report).unwrap();
        for key in ["iou", "dice", "ppv", "sensitivity", "specificity", "mae", "game_L"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        assert!(json["game_L"].get("4").is_some());
    }
}
