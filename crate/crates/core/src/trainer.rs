//! Two-branch shared-weight training with per-image transform sampling.
//!
//! Each training step runs the network on an image and on a transformed copy,
//! applies the point loss to both branches, adds the weighted consistency
//! term, and takes one Adam step per batch on the summed loss. Transform
//! draws and the epoch shuffle come from dedicated seeded streams, and batch
//! gradients are reduced in image-index order, so runs are bit-reproducible
//! at any thread count.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::Slice;
use crate::error::{Error, Result};
use crate::geometry::{self, sample_transform, GeometricTransform, TransformFamily};
use crate::losses::{self, LossConfig, Reduction};
use crate::metrics::{self, centroids_from_mask, ConfusionTotals, CountRecord, SegScores};
use crate::model::{
    backward, forward, forward_with_tape, softmax_probs, ConvParams, ModelConfig, NetworkParams,
    ParamGrads,
};
use crate::seed::derive_seed;

/// Seed streams hanging off the run's root seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_TRANSFORM: u64 = 3;

/// The training objective, named as it appears in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "pl")]
    Pl,
    #[serde(rename = "cb_flip_pl")]
    CbFlipPl,
    #[serde(rename = "cb_fliprot_pl")]
    CbFlipRotPl,
    #[serde(rename = "full_sup")]
    FullSup,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Pl => "pl",
            LossKind::CbFlipPl => "cb_flip_pl",
            LossKind::CbFlipRotPl => "cb_fliprot_pl",
            LossKind::FullSup => "full_sup",
        }
    }

    /// The transform family a consistency-based loss samples from.
    pub fn family(&self) -> Option<TransformFamily> {
        match self {
            LossKind::CbFlipPl => Some(TransformFamily::flip()),
            LossKind::CbFlipRotPl => Some(TransformFamily::flip_rot()),
            _ => None,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pl" => Ok(LossKind::Pl),
            "cb_flip_pl" => Ok(LossKind::CbFlipPl),
            "cb_fliprot_pl" => Ok(LossKind::CbFlipRotPl),
            "full_sup" => Ok(LossKind::FullSup),
            other => Err(Error::contract(format!("unknown loss `{other}`"))),
        }
    }
}

/// Validation metric used for best-checkpoint retention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValMetric {
    Dice,
    Iou,
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub lambda_weight: f64,
    pub consistency_reduction: Reduction,
    pub model: ModelConfig,
    pub val_metric: ValMetric,
    /// Worker threads for per-image parallelism; 0 uses the process default.
    /// Results are bit-identical at any setting.
    pub threads: usize,
    /// Transform family override; defaults to the family implied by `loss`.
    #[serde(default)]
    pub family_override: Option<TransformFamily>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            learning_rate: 1e-4,
            seed: 0,
            loss: LossKind::CbFlipRotPl,
            lambda_weight: 1.0,
            consistency_reduction: Reduction::Mean,
            model: ModelConfig::default(),
            val_metric: ValMetric::Dice,
            threads: 0,
            family_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.lambda_weight < 0.0 {
            return Err(Error::contract("lambda_weight must be non-negative"));
        }
        self.model.validate()
    }

    fn family(&self) -> Option<TransformFamily> {
        self.family_override.clone().or_else(|| self.loss.family())
    }
}

/// One epoch's log entry. These lines are the deterministic run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub lr: f64,
    pub transforms_histogram: BTreeMap<String, u64>,
}

/// Summary of a completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub total_steps: u64,
    pub wall_clock_secs: f64,
}

struct Adam {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &NetworkParams) -> Adam {
        Adam {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);

        fn update(p: &mut ConvParams, g: &ConvParams, m: &mut ConvParams, v: &mut ConvParams, lr: f64, bc1: f64, bc2: f64) {
            ndarray::Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                });
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                });
        }

        update(&mut params.stem, &grads.stem, &mut self.m.stem, &mut self.v.stem, lr, bc1, bc2);
        for i in 0..params.encoders.len() {
            update(
                &mut params.encoders[i],
                &grads.encoders[i],
                &mut self.m.encoders[i],
                &mut self.v.encoders[i],
                lr,
                bc1,
                bc2,
            );
        }
        for i in 0..params.decoders.len() {
            update(
                &mut params.decoders[i],
                &grads.decoders[i],
                &mut self.m.decoders[i],
                &mut self.v.decoders[i],
                lr,
                bc1,
                bc2,
            );
        }
        update(&mut params.head, &grads.head, &mut self.m.head, &mut self.v.head, lr, bc1, bc2);
    }
}

fn check_finite(logits: &crate::model::LogitMap) -> Result<()> {
    if logits.grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValues("network logits".into()));
    }
    Ok(())
}

/// Loss and parameter gradients for a single image.
fn image_step(
    params: &NetworkParams,
    slice: &Slice,
    cfg: &TrainConfig,
    transform: Option<GeometricTransform>,
) -> Result<(f64, ParamGrads)> {
    match cfg.loss {
        LossKind::Pl => {
            let pmask = slice.point_mask.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "slice {}/{} has no point annotation",
                    slice.scan_id, slice.slice_index
                ))
            })?;
            let (logits, tape) = forward_with_tape(params, &slice.image)?;
            check_finite(&logits)?;
            let prob = softmax_probs(&logits)?;
            let (loss, gz) = losses::point_loss_grad(&prob, pmask)?;
            Ok((loss, backward(params, &tape, &gz)))
        }
        LossKind::FullSup => {
            let mask = slice.full_mask.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "slice {}/{} has no full mask",
                    slice.scan_id, slice.slice_index
                ))
            })?;
            let (logits, tape) = forward_with_tape(params, &slice.image)?;
            check_finite(&logits)?;
            let prob = softmax_probs(&logits)?;
            let (loss, gz) = losses::full_supervision_loss_grad(&prob, mask)?;
            Ok((loss, backward(params, &tape, &gz)))
        }
        LossKind::CbFlipPl | LossKind::CbFlipRotPl => {
            let pmask = slice.point_mask.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "slice {}/{} has no point annotation",
                    slice.scan_id, slice.slice_index
                ))
            })?;
            let t = transform.expect("consistency losses sample a transform per image");
            let image_t = geometry::apply_to_grid3(t, &slice.image);

            let (logits_x, tape_x) = forward_with_tape(params, &slice.image)?;
            let (logits_tx, tape_tx) = forward_with_tape(params, &image_t)?;
            check_finite(&logits_x)?;
            check_finite(&logits_tx)?;
            let prob_x = softmax_probs(&logits_x)?;
            let prob_tx = softmax_probs(&logits_tx)?;

            let loss_cfg = LossConfig {
                lambda_weight: cfg.lambda_weight,
                consistency_reduction: cfg.consistency_reduction,
                family: cfg.family().expect("cb loss has a family"),
            };
            let (loss, gz_x, gz_tx) =
                losses::cb_total_loss_grad(&prob_x, &prob_tx, pmask, t, &loss_cfg)?;

            let mut grads = backward(params, &tape_x, &gz_x);
            grads.add_assign(&backward(params, &tape_tx, &gz_tx));
            Ok((loss, grads))
        }
    }
}

/// Trains on `train_set`, evaluating on `val_set` after each epoch, and
/// returns the parameters of the best validation epoch plus the run record.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Slice],
    val_set: &[Slice],
) -> Result<(NetworkParams, RunRecord)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("train and validation sets must be non-empty"));
    }

    let started = Instant::now();
    let pool = if cfg.threads > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::contract(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut params = NetworkParams::init(&cfg.model, derive_seed(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut transform_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TRANSFORM));
    let family = cfg.family();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NetworkParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut histogram: BTreeMap<String, u64> = family
            .as_ref()
            .map(|f| f.members().iter().map(|t| (t.to_string(), 0)).collect())
            .unwrap_or_default();

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Transforms are drawn sequentially in image order so the stream
            // is independent of thread scheduling.
            let jobs: Vec<(usize, Option<GeometricTransform>)> = chunk
                .iter()
                .map(|&idx| {
                    let t = family.as_ref().map(|f| sample_transform(&mut transform_rng, f));
                    if let Some(t) = t {
                        *histogram.get_mut(&t.to_string()).expect("family member") += 1;
                    }
                    (idx, t)
                })
                .collect();

            let run = || -> Vec<Result<(f64, ParamGrads)>> {
                jobs.par_iter()
                    .map(|&(idx, t)| image_step(&params, &train_set[idx], cfg, t))
                    .collect()
            };
            let results = match &pool {
                Some(p) => p.install(run),
                None => run(),
            };

            let mut batch_loss = 0.0;
            let mut batch_grads = ParamGrads::zeros_like(&params);
            for result in results {
                let (loss, grads) = match result {
                    Ok(ok) => ok,
                    Err(Error::NonFiniteValues(_)) => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        })
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += loss;
                batch_grads.add_assign(&grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.step(&mut params, &batch_grads, cfg.learning_rate);
            params.step += 1;
            epoch_loss += batch_loss;
        }

        let seg = evaluate(&params, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_dice: seg.dice,
            val_iou: seg.iou,
            lr: cfg.learning_rate,
            transforms_histogram: histogram,
        };
        let metric = match cfg.val_metric {
            ValMetric::Dice => seg.dice,
            ValMetric::Iou => seg.iou,
        };
        if best.as_ref().is_none_or(|(b, _, _)| metric > *b) {
            best = Some((metric, epoch, params.clone()));
        }
        records.push(record);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let best_val_dice = records[best_epoch - 1].val_dice;
    let record = RunRecord {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: records,
        best_epoch,
        best_val_dice,
        total_steps: params.step,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, record))
}

/// Predicted binary mask for one slice.
pub fn predict_mask(params: &NetworkParams, slice: &Slice) -> Result<Array2<u8>> {
    let logits = forward(params, &slice.image)?;
    let prob = softmax_probs(&logits)?;
    Ok(crate::model::predict_labels(&prob))
}

/// Runs the model over a split and micro-aggregates the five segmentation
/// scores against full masks.
pub fn evaluate(params: &NetworkParams, slices: &[Slice]) -> Result<SegScores> {
    let per_slice: Vec<Result<ConfusionTotals>> = slices
        .par_iter()
        .map(|slice| {
            let gt = slice.full_mask.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "slice {}/{} has no full mask for evaluation",
                    slice.scan_id, slice.slice_index
                ))
            })?;
            let pred = predict_mask(params, slice)?;
            let mut totals = ConfusionTotals::default();
            totals.accumulate(&pred, gt)?;
            Ok(totals)
        })
        .collect();

    let mut totals = ConfusionTotals::default();
    for t in per_slice {
        totals.merge(&t?);
    }
    Ok(metrics::scores(&totals))
}

/// Counting metrics over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountEval {
    pub mae: f64,
    pub game: f64,
}

/// Counts and localizes predicted regions against ground truth: MAE over
/// region counts and GAME at the requested level.
pub fn count_eval(params: &NetworkParams, slices: &[Slice], level: u32) -> Result<CountEval> {
    if slices.is_empty() {
        return Err(Error::contract("count_eval needs at least one slice"));
    }
    let dims = {
        let (h, w, _) = slices[0].image.dim();
        (h, w)
    };
    let records: Vec<CountRecord> = slices
        .par_iter()
        .map(|slice| -> Result<CountRecord> {
            let gt = slice.full_mask.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "slice {}/{} has no full mask for counting",
                    slice.scan_id, slice.slice_index
                ))
            })?;
            let pred = predict_mask(params, slice)?;
            Ok(CountRecord {
                predicted: centroids_from_mask(&pred),
                ground_truth: centroids_from_mask(gt),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CountEval {
        mae: metrics::mae_counts(&records)?,
        game: metrics::game(&records, level, dims.0, dims.1)?,
    })
}

/// Builds per-slice count records with a caller-supplied predictor, so any
/// model's predictions can be scored.
pub fn count_records<F>(slices: &[Slice], mut predict: F) -> Result<Vec<CountRecord>>
where
    F: FnMut(&Slice) -> Result<Array2<u8>>,
{
    slices
        .iter()
        .map(|slice| {
            let gt = slice.full_mask.as_ref().ok_or_else(|| {
                Error::contract("slice has no full mask for counting".to_string())
            })?;
            Ok(CountRecord {
                predicted: centroids_from_mask(&predict(slice)?),
                ground_truth: centroids_from_mask(gt),
            })
        })
        .collect()
}

/// Writes one JSON object per epoch; the deterministic run log.
pub fn write_run_log(path: &std::path::Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for record in epochs {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{points_from_mask, rasterize_points, SynthConfig};

    fn synth_slices(seed: u64, n: usize, size: usize) -> Vec<Slice> {
        let cfg = SynthConfig {
            height: size,
            width: size,
            n_regions_range: (1, 2),
            radius_range: (1.5, 2.0),
            ..SynthConfig::default()
        };
        crate::annotations::synth_dataset(seed, n, &cfg)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let (h, w) = s.image.dim();
                let mut pm = rasterize_points(&s.annotation, h, w).unwrap();
                if s.annotation.is_empty() {
                    pm = pm.into_background_only();
                }
                Slice {
                    image: crate::annotations::replicate_channels(&s.image, 1),
                    full_mask: Some(s.mask),
                    point_mask: Some(pm),
                    scan_id: "synth".into(),
                    slice_index: i,
                }
            })
            .collect()
    }

    fn small_train_config(loss: LossKind, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            learning_rate: 1e-3,
            seed: 7,
            loss,
            model: ModelConfig {
                in_channels: 1,
                num_classes: 2,
                stem_channels: 4,
                stage_channels: vec![8],
                kernel_size: 3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_batch_one_step() {
        let slices = synth_slices(1, 8, 16);
        let cfg = small_train_config(LossKind::Pl, 1);
        let (best, record) = train(&cfg, &slices, &slices).unwrap();
        assert_eq!(record.total_steps, 1);
        assert_eq!(best.step, 1);
        assert_eq!(record.epochs.len(), 1);
    }

    #[test]
    fn best_pointer_matches_epoch_series() {
        let slices = synth_slices(2, 8, 16);
        let cfg = small_train_config(LossKind::CbFlipPl, 3);
        let (_, record) = train(&cfg, &slices, &slices).unwrap();
        let max = record
            .epochs
            .iter()
            .map(|e| e.val_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(record.best_val_dice, max);
        assert_eq!(
            record.epochs[record.best_epoch - 1].val_dice,
            record.best_val_dice
        );
    }

    #[test]
    fn seed_determinism_across_runs_and_threads() {
        let slices = synth_slices(3, 10, 16);
        let mut cfg = small_train_config(LossKind::CbFlipRotPl, 2);
        cfg.threads = 1;
        let (params_a, rec_a) = train(&cfg, &slices, &slices).unwrap();
        cfg.threads = 2;
        let (params_b, rec_b) = train(&cfg, &slices, &slices).unwrap();
        assert_eq!(params_a, params_b);
        assert_eq!(
            serde_json::to_string(&rec_a.epochs).unwrap(),
            serde_json::to_string(&rec_b.epochs).unwrap()
        );
    }

    #[test]
    fn transforms_drawn_only_from_family() {
        let slices = synth_slices(4, 8, 16);
        let cfg = small_train_config(LossKind::CbFlipPl, 2);
        let (_, record) = train(&cfg, &slices, &slices).unwrap();
        for epoch in &record.epochs {
            assert_eq!(epoch.transforms_histogram.len(), 1);
            assert_eq!(
                *epoch.transforms_histogram.get("hflip").unwrap(),
                slices.len() as u64
            );
        }
    }

    #[test]
    fn cb_identity_lambda_zero_matches_doubled_pl_reference() {
        // Reference loop: point loss with doubled gradient, same seeds.
        // Doubling is exact in binary floating point, so the trainer's
        // two-identical-branch path must match bit for bit.
        let slices = synth_slices(5, 8, 16);
        let mut cfg = small_train_config(LossKind::CbFlipRotPl, 2);
        cfg.lambda_weight = 0.0;
        cfg.family_override = Some(TransformFamily::identity());
        let (_, record) = train(&cfg, &slices, &slices).unwrap();

        // Independent reference loop.
        let ref_cfg = small_train_config(LossKind::Pl, 2);
        let mut params =
            NetworkParams::init(&ref_cfg.model, derive_seed(ref_cfg.seed, STREAM_INIT)).unwrap();
        let mut adam = Adam::new(&params);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(ref_cfg.seed, STREAM_SHUFFLE));
        let mut losses_per_epoch = Vec::new();
        for _ in 0..2 {
            let mut order: Vec<usize> = (0..slices.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(ref_cfg.batch_size) {
                let mut batch_loss = 0.0;
                let mut batch_grads = ParamGrads::zeros_like(&params);
                for &idx in chunk {
                    let slice = &slices[idx];
                    let (logits, tape) = forward_with_tape(&params, &slice.image).unwrap();
                    let prob = softmax_probs(&logits).unwrap();
                    let (loss, gz) =
                        losses::point_loss_grad(&prob, slice.point_mask.as_ref().unwrap())
                            .unwrap();
                    let gz2 = gz.mapv(|v| 2.0 * v);
                    batch_loss += 2.0 * loss;
                    batch_grads.add_assign(&backward(&params, &tape, &gz2));
                }
                adam.step(&mut params, &batch_grads, ref_cfg.learning_rate);
                epoch_loss += batch_loss;
            }
            losses_per_epoch.push(epoch_loss / slices.len() as f64);
        }

        for (got, want) in record
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .zip(losses_per_epoch)
        {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn evaluate_perfect_stub_and_determinism() {
        // A split evaluated against itself through count records.
        let slices = synth_slices(6, 5, 16);
        let records =
            count_records(&slices, |s| Ok(s.full_mask.clone().unwrap())).unwrap();
        assert_eq!(metrics::mae_counts(&records).unwrap(), 0.0);
        assert_eq!(metrics::game(&records, 2, 16, 16).unwrap(), 0.0);

        // Stub emitting empty masks: mae == total regions / images.
        let empty = Array2::<u8>::zeros((16, 16));
        let records = count_records(&slices, |_| Ok(empty.clone())).unwrap();
        let total_regions: usize = slices
            .iter()
            .map(|s| {
                crate::annotations::connected_regions(
                    s.full_mask.as_ref().unwrap(),
                    crate::annotations::Connectivity::Eight,
                )
                .count as usize
            })
            .sum();
        let mae = metrics::mae_counts(&records).unwrap();
        assert!((mae - total_regions as f64 / slices.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn all_background_split_flags_degenerate_scores() {
        // Head bias forces class 0 everywhere; masks are all background.
        let cfg = small_train_config(LossKind::Pl, 1);
        let mut params = NetworkParams::init(&cfg.model, 0).unwrap();
        params.head.bias[0] = 10.0;
        params.head.bias[1] = -10.0;
        let slices: Vec<Slice> = synth_slices(10, 4, 16)
            .into_iter()
            .map(|mut s| {
                s.full_mask = Some(Array2::zeros((16, 16)));
                s
            })
            .collect();
        let seg = evaluate(&params, &slices).unwrap();
        assert_eq!(seg.specificity, 1.0);
        assert!(!seg.degenerate.contains(&"specificity".to_string()));
        assert_eq!(seg.iou, 1.0);
        assert!(seg.degenerate.contains(&"iou".to_string()));
        assert!(seg.degenerate.contains(&"sensitivity".to_string()));
    }

    #[test]
    fn evaluate_requires_masks() {
        let mut slices = synth_slices(7, 3, 16);
        let cfg = small_train_config(LossKind::Pl, 1);
        let params = NetworkParams::init(&cfg.model, 0).unwrap();
        slices[1].full_mask = None;
        assert!(evaluate(&params, &slices).is_err());
    }

    #[test]
    fn nonfinite_loss_aborts_with_location() {
        let slices = synth_slices(8, 4, 16);
        let mut cfg = small_train_config(LossKind::Pl, 1);
        cfg.learning_rate = f64::MAX; // drives parameters to overflow
        cfg.batch_size = 2;
        cfg.epochs = 3;
        match train(&cfg, &slices, &slices) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let slices = synth_slices(9, 6, 16);
        let cfg = small_train_config(LossKind::CbFlipPl, 1);
        let (best, _) = train(&cfg, &slices, &slices).unwrap();
        let before = evaluate(&best, &slices).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        crate::model::save_checkpoint(&best, &serde_json::Value::Null, &path).unwrap();
        let (loaded, _) = crate::model::load_checkpoint(&path).unwrap();
        let after = evaluate(&loaded, &slices).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn points_from_mask_integration() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = ndarray::array![[0u8, 1], [0, 0]];
        let ann = points_from_mask(&mask, &mut rng).unwrap();
        assert_eq!(ann.class_count(1), 1);
    }
}
