//! Point-supervised segmentation with transform-consistency training.
//!
//! The crate is organized around the stages of a weakly supervised
//! segmentation run:
//!
//! - [`geometry`] — exact, invertible grid transforms (rotations, flip) shared
//!   by images, label grids, probability maps, and point coordinates.
//! - [`annotations`] — point-label generation from full masks (distance-transform
//!   argmax per region plus sampled background points), connected components,
//!   and a synthetic ellipse dataset generator.
//! - [`losses`] — the training objective: point-level cross-entropy, the
//!   transform-consistency penalty, their weighted combination, and a
//!   fully supervised surrogate. Every loss has an analytic gradient with
//!   respect to pre-softmax logits.
//! - [`model`] — a small fully-convolutional encoder/decoder network with
//!   hand-derived backpropagation, seed-deterministic initialization, and a
//!   bit-exact checkpoint format.
//! - [`metrics`] — micro-aggregated segmentation scores (IoU, Dice, PPV,
//!   sensitivity, specificity) and counting scores (MAE, GAME).
//! - [`data`] — raw volume I/O, Hounsfield windowing, resize/normalize
//!   preprocessing, and mixed/separate split construction.
//! - [`trainer`] — the two-branch shared-weight training loop with per-image
//!   transform sampling, Adam optimization, best-checkpoint retention, and
//!   deterministic run logs.

pub mod annotations;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
