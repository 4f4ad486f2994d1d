//! Training objectives and their analytic gradients.
//!
//! Every loss is defined over per-pixel softmax probabilities and exposes a
//! companion `*_grad` function returning the gradient with respect to the
//! pre-softmax logits, suitable for feeding straight into the model's
//! backward pass. Gradients are verified against central finite differences
//! in the acceptance suite.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::annotations::{PointMask, UNLABELED};
use crate::error::{Error, Result};
use crate::geometry::{self, GeometricTransform, TransformFamily};

/// Probabilities below this are clamped before logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Per-pixel class probabilities, channel-last `(H, W, C)`. Each pixel's
/// channel values sum to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    grid: Array3<f64>,
}

impl ProbMap {
    pub fn new(grid: Array3<f64>) -> Result<Self> {
        for px in grid.rows() {
            let mut sum = 0.0;
            for &v in px {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::contract(
                        "probability map entries must be finite and non-negative",
                    ));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "pixel probabilities sum to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbMap { grid })
    }

    pub fn grid(&self) -> &Array3<f64> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }
}

/// How the consistency penalty aggregates over pixels and classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Weighting and transform configuration for the combined loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the consistency term. Zero recovers the plain point loss.
    pub lambda_weight: f64,
    pub consistency_reduction: Reduction,
    pub family: TransformFamily,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_weight: 1.0,
            consistency_reduction: Reduction::Mean,
            family: TransformFamily::flip_rot(),
        }
    }
}

fn check_shapes(prob: &ProbMap, h: usize, w: usize) -> Result<()> {
    let (ph, pw, _) = prob.dims();
    if (ph, pw) != (h, w) {
        return Err(Error::contract(format!(
            "probability map is {ph}x{pw}, labels are {h}x{w}"
        )));
    }
    Ok(())
}

/// Cross-entropy over the labeled pixels of a point mask.
///
/// With zero labeled pixels the loss is 0, unless the mask is flagged
/// background-only, in which case every pixel counts as labeled background.
pub fn point_loss(prob: &ProbMap, pmask: &PointMask) -> Result<f64> {
    let (h, w) = pmask.dims();
    check_shapes(prob, h, w)?;
    let g = prob.grid();
    let mut total = 0.0;
    if pmask.labeled_count() == 0 {
        if pmask.background_only {
            for r in 0..h {
                for c in 0..w {
                    total -= g[[r, c, 0]].max(PROB_CLAMP).ln();
                }
            }
        }
        return Ok(total);
    }
    for r in 0..h {
        for c in 0..w {
            let label = pmask.grid[[r, c]];
            if label == UNLABELED {
                continue;
            }
            total -= g[[r, c, label as usize]].max(PROB_CLAMP).ln();
        }
    }
    Ok(total)
}

/// [`point_loss`] plus its gradient with respect to the logits behind `prob`.
pub fn point_loss_grad(prob: &ProbMap, pmask: &PointMask) -> Result<(f64, Array3<f64>)> {
    let value = point_loss(prob, pmask)?;
    let (h, w, ch) = prob.dims();
    let g = prob.grid();
    let mut grad = Array3::<f64>::zeros((h, w, ch));
    let all_background = pmask.labeled_count() == 0 && pmask.background_only;
    if pmask.labeled_count() == 0 && !pmask.background_only {
        return Ok((value, grad));
    }
    for r in 0..h {
        for c in 0..w {
            let label = if all_background {
                0usize
            } else {
                let l = pmask.grid[[r, c]];
                if l == UNLABELED {
                    continue;
                }
                l as usize
            };
            // -ln(max(p_y, clamp)): constant (zero gradient) below the clamp.
            if g[[r, c, label]] <= PROB_CLAMP {
                continue;
            }
            for k in 0..ch {
                let indicator = if k == label { 1.0 } else { 0.0 };
                grad[[r, c, k]] += g[[r, c, k]] - indicator;
            }
        }
    }
    Ok((value, grad))
}

/// Elementwise L1 gap between the transformed branch-1 probabilities and the
/// branch-2 probabilities, aggregated over all pixels and classes.
pub fn consistency_loss(
    prob_x: &ProbMap,
    prob_tx: &ProbMap,
    t: GeometricTransform,
    reduction: Reduction,
) -> Result<f64> {
    let transformed = geometry::apply_to_grid3(t, prob_x.grid());
    if transformed.dim() != prob_tx.dims() {
        return Err(Error::contract(format!(
            "transformed branch shape {:?} does not match second branch {:?}",
            transformed.dim(),
            prob_tx.dims()
        )));
    }
    let mut total = 0.0;
    for (a, b) in transformed.iter().zip(prob_tx.grid().iter()) {
        total += (a - b).abs();
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / transformed.len() as f64,
    })
}

/// [`consistency_loss`] plus gradients with respect to both branches' logits.
pub fn consistency_loss_grad(
    prob_x: &ProbMap,
    prob_tx: &ProbMap,
    t: GeometricTransform,
    reduction: Reduction,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    let transformed = geometry::apply_to_grid3(t, prob_x.grid());
    if transformed.dim() != prob_tx.dims() {
        return Err(Error::contract(format!(
            "transformed branch shape {:?} does not match second branch {:?}",
            transformed.dim(),
            prob_tx.dims()
        )));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / transformed.len() as f64,
    };
    let mut total = 0.0;
    let mut sign = Array3::<f64>::zeros(transformed.dim());
    ndarray::Zip::from(&mut sign)
        .and(&transformed)
        .and(prob_tx.grid())
        .for_each(|s, &a, &b| {
            let d = a - b;
            total += d.abs();
            *s = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        });

    // d/d t(p_x) = sign, mapped back through the inverse permutation;
    // d/d p_tx = -sign.
    let gp_x = geometry::apply_to_grid3(t.inverse(), &sign);
    let gp_tx = sign.mapv(|v| -v);

    let gz_x = grad_probs_to_logits(prob_x, &gp_x);
    let gz_tx = grad_probs_to_logits(prob_tx, &gp_tx);
    Ok((total * scale, gz_x, gz_tx))
}

/// The combined objective: point loss on both branches plus the weighted
/// consistency term.
pub fn cb_total_loss(
    prob_x: &ProbMap,
    prob_tx: &ProbMap,
    pmask: &PointMask,
    t: GeometricTransform,
    cfg: &LossConfig,
) -> Result<f64> {
    let lp_x = point_loss(prob_x, pmask)?;
    let lp_tx = point_loss(prob_tx, &pmask.transformed(t))?;
    let lc = consistency_loss(prob_x, prob_tx, t, cfg.consistency_reduction)?;
    Ok(lp_x + lp_tx + cfg.lambda_weight * lc)
}

/// [`cb_total_loss`] plus gradients with respect to both branches' logits.
pub fn cb_total_loss_grad(
    prob_x: &ProbMap,
    prob_tx: &ProbMap,
    pmask: &PointMask,
    t: GeometricTransform,
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    let (lp_x, mut gz_x) = point_loss_grad(prob_x, pmask)?;
    let (lp_tx, gz_tx_point) = point_loss_grad(prob_tx, &pmask.transformed(t))?;
    let (lc, gz_x_cons, gz_tx_cons) =
        consistency_loss_grad(prob_x, prob_tx, t, cfg.consistency_reduction)?;

    gz_x.scaled_add(cfg.lambda_weight, &gz_x_cons);
    let mut gz_tx = gz_tx_point;
    gz_tx.scaled_add(cfg.lambda_weight, &gz_tx_cons);
    Ok((lp_x + lp_tx + cfg.lambda_weight * lc, gz_x, gz_tx))
}

/// Fully supervised surrogate: pixel-averaged cross-entropy against the full
/// mask plus a soft-IoU term `1 - I/U` on the foreground channel.
pub fn full_supervision_loss(prob: &ProbMap, mask: &Array2<u8>) -> Result<f64> {
    let (h, w) = mask.dim();
    check_shapes(prob, h, w)?;
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::contract("full mask must be binary"));
    }
    let g = prob.grid();
    let n = (h * w) as f64;
    let mut ce = 0.0;
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut m_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let m = mask[[r, c]] as usize;
            ce -= g[[r, c, m]].max(PROB_CLAMP).ln();
            let p_fg = g[[r, c, 1]];
            inter += p_fg * m as f64;
            p_sum += p_fg;
            m_sum += m as f64;
        }
    }
    let union = p_sum + m_sum - inter;
    let iou_term = if union > 0.0 { 1.0 - inter / union } else { 0.0 };
    Ok(ce / n + iou_term)
}

/// [`full_supervision_loss`] plus its gradient with respect to the logits.
pub fn full_supervision_loss_grad(
    prob: &ProbMap,
    mask: &Array2<u8>,
) -> Result<(f64, Array3<f64>)> {
    let value = full_supervision_loss(prob, mask)?;
    let (h, w, ch) = prob.dims();
    let g = prob.grid();
    let n = (h * w) as f64;

    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut m_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            inter += g[[r, c, 1]] * mask[[r, c]] as f64;
            p_sum += g[[r, c, 1]];
            m_sum += mask[[r, c]] as f64;
        }
    }
    let union = p_sum + m_sum - inter;

    let mut gp = Array3::<f64>::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            let m = mask[[r, c]] as usize;
            let p = g[[r, c, m]];
            if p > PROB_CLAMP {
                gp[[r, c, m]] -= 1.0 / (n * p);
            }
            if union > 0.0 {
                let mf = m as f64;
                gp[[r, c, 1]] -= (mf * union - inter * (1.0 - mf)) / (union * union);
            }
        }
    }
    let gz = grad_probs_to_logits(prob, &gp);
    Ok((value, gz))
}

/// Chain rule through the per-pixel softmax:
/// `dL/dz_c = p_c * (dL/dp_c - sum_k dL/dp_k * p_k)`.
pub fn grad_probs_to_logits(prob: &ProbMap, grad_probs: &Array3<f64>) -> Array3<f64> {
    let (h, w, ch) = prob.dims();
    let p = prob.grid();
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            let mut dot = 0.0;
            for k in 0..ch {
                dot += grad_probs[[r, c, k]] * p[[r, c, k]];
            }
            for k in 0..ch {
                out[[r, c, k]] = p[[r, c, k]] * (grad_probs[[r, c, k]] - dot);
            }
        }
    }
    out
}
