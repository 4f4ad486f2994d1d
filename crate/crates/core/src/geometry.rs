//! Exact, invertible geometric transforms on pixel grids.
//!
//! All five transforms are pure coordinate permutations: no interpolation and
//! no pixel loss, so images, label grids, point masks, and probability maps
//! share one code path. Rotations are counter-clockwise; `Rot90` maps
//! `out[r][c] = in[c][W-1-r]`.

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One element of the transform set: identity, quarter-turn rotations, or a
/// horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometricTransform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
}

impl GeometricTransform {
    /// All five supported transforms, in canonical order.
    pub const ALL: [GeometricTransform; 5] = [
        GeometricTransform::Identity,
        GeometricTransform::Rot90,
        GeometricTransform::Rot180,
        GeometricTransform::Rot270,
        GeometricTransform::HFlip,
    ];

    /// The transform `s` with `apply(s, apply(self, g)) == g` for every grid.
    pub fn inverse(self) -> GeometricTransform {
        match self {
            GeometricTransform::Identity => GeometricTransform::Identity,
            GeometricTransform::Rot90 => GeometricTransform::Rot270,
            GeometricTransform::Rot180 => GeometricTransform::Rot180,
            GeometricTransform::Rot270 => GeometricTransform::Rot90,
            GeometricTransform::HFlip => GeometricTransform::HFlip,
        }
    }

    /// Output (height, width) of a transformed `h x w` grid.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeometricTransform::Rot90 | GeometricTransform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Maps a pixel coordinate under the same bijection as [`apply_to_grid`].
    ///
    /// `(h, w)` are the dimensions of the *input* grid; the returned
    /// coordinate indexes the transformed grid.
    pub fn map_point(self, row: usize, col: usize, h: usize, w: usize) -> (usize, usize) {
        debug_assert!(row < h && col < w);
        match self {
            GeometricTransform::Identity => (row, col),
            GeometricTransform::Rot90 => (w - 1 - col, row),
            GeometricTransform::Rot180 => (h - 1 - row, w - 1 - col),
            GeometricTransform::Rot270 => (col, h - 1 - row),
            GeometricTransform::HFlip => (row, w - 1 - col),
        }
    }
}

impl fmt::Display for GeometricTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GeometricTransform::Identity => "identity",
            GeometricTransform::Rot90 => "rot90",
            GeometricTransform::Rot180 => "rot180",
            GeometricTransform::Rot270 => "rot270",
            GeometricTransform::HFlip => "hflip",
        };
        f.write_str(name)
    }
}

impl FromStr for GeometricTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(GeometricTransform::Identity),
            "rot90" => Ok(GeometricTransform::Rot90),
            "rot180" => Ok(GeometricTransform::Rot180),
            "rot270" => Ok(GeometricTransform::Rot270),
            "hflip" => Ok(GeometricTransform::HFlip),
            other => Err(Error::contract(format!("unknown transform name `{other}`"))),
        }
    }
}

/// A non-empty ordered set of transforms to sample from during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformFamily {
    members: Vec<GeometricTransform>,
}

impl TransformFamily {
    pub fn new(members: Vec<GeometricTransform>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::contract("transform family must be non-empty"));
        }
        Ok(TransformFamily { members })
    }

    /// The `{hflip}` family. Identity is deliberately excluded: it would
    /// zero the consistency signal on half the steps.
    pub fn flip() -> Self {
        TransformFamily {
            members: vec![GeometricTransform::HFlip],
        }
    }

    /// The `{identity, rot90, rot180, rot270, hflip}` family.
    pub fn flip_rot() -> Self {
        TransformFamily {
            members: GeometricTransform::ALL.to_vec(),
        }
    }

    /// The `{identity}` family.
    pub fn identity() -> Self {
        TransformFamily {
            members: vec![GeometricTransform::Identity],
        }
    }

    pub fn members(&self) -> &[GeometricTransform] {
        &self.members
    }
}

/// Uniformly samples one member of `family`. Deterministic under a fixed
/// rng state.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    family: &TransformFamily,
) -> GeometricTransform {
    let members = family.members();
    members[rng.gen_range(0..members.len())]
}

/// Applies `t` to a 2-D grid. Pure permutation: the output holds exactly the
/// input's values, rearranged.
pub fn apply_to_grid<T: Clone>(t: GeometricTransform, grid: &Array2<T>) -> Array2<T> {
    let (h, w) = grid.dim();
    match t {
        GeometricTransform::Identity => grid.clone(),
        GeometricTransform::Rot90 => {
            Array2::from_shape_fn((w, h), |(r, c)| grid[[c, w - 1 - r]].clone())
        }
        GeometricTransform::Rot180 => {
            Array2::from_shape_fn((h, w), |(r, c)| grid[[h - 1 - r, w - 1 - c]].clone())
        }
        GeometricTransform::Rot270 => {
            Array2::from_shape_fn((w, h), |(r, c)| grid[[h - 1 - c, r]].clone())
        }
        GeometricTransform::HFlip => {
            Array2::from_shape_fn((h, w), |(r, c)| grid[[r, w - 1 - c]].clone())
        }
    }
}

/// Applies `t` to a 3-D grid with a trailing channel axis. Channels are
/// carried along untouched.
pub fn apply_to_grid3<T: Clone>(t: GeometricTransform, grid: &Array3<T>) -> Array3<T> {
    let (h, w, ch) = grid.dim();
    match t {
        GeometricTransform::Identity => grid.clone(),
        GeometricTransform::Rot90 => {
            Array3::from_shape_fn((w, h, ch), |(r, c, k)| grid[[c, w - 1 - r, k]].clone())
        }
        GeometricTransform::Rot180 => {
            Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
                grid[[h - 1 - r, w - 1 - c, k]].clone()
            })
        }
        GeometricTransform::Rot270 => {
            Array3::from_shape_fn((w, h, ch), |(r, c, k)| grid[[h - 1 - c, r, k]].clone())
        }
        GeometricTransform::HFlip => {
            Array3::from_shape_fn((h, w, ch), |(r, c, k)| grid[[r, w - 1 - c, k]].clone())
        }
    }
}

/// Applies `t` to a dynamically shaped grid. Accepts 2-D grids and 3-D grids
/// with a trailing channel axis; anything else is a contract violation.
pub fn apply_transform<T: Clone>(t: GeometricTransform, grid: &ArrayD<T>) -> Result<ArrayD<T>> {
    match grid.ndim() {
        2 => {
            let g = grid
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("ndim checked");
            Ok(apply_to_grid(t, &g.to_owned()).into_dyn())
        }
        3 => {
            let g = grid
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("ndim checked");
            Ok(apply_to_grid3(t, &g.to_owned()).into_dyn())
        }
        n => Err(Error::contract(format!(
            "apply_transform requires a 2-D or 3-D grid, got {n} dims"
        ))),
    }
}

/// A point annotation entry: pixel coordinate plus class id.
pub type ClassPoint = (usize, usize, u8);

/// Maps point coordinates under the same bijection as [`apply_to_grid`].
/// Classes are unchanged. Points must lie inside `[0,h) x [0,w)`.
pub fn transform_points(
    t: GeometricTransform,
    points: &[ClassPoint],
    h: usize,
    w: usize,
) -> Result<Vec<ClassPoint>> {
    points
        .iter()
        .map(|&(r, c, class)| {
            if r >= h || c >= w {
                return Err(Error::contract(format!(
                    "point ({r}, {c}) outside {h}x{w} grid"
                )));
            }
            let (nr, nc) = t.map_point(r, c, h, w);
            Ok((nr, nc, class))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hflip_mirrors_columns() {
        let g = array![[1, 2], [3, 4]];
        assert_eq!(
            apply_to_grid(GeometricTransform::HFlip, &g),
            array![[2, 1], [4, 3]]
        );
    }

    #[test]
    fn rot90_matches_coordinate_map() {
        // out[r][c] = in[c][W-1-r], enumerated over all four pixels.
        let g = array![[1, 2], [3, 4]];
        assert_eq!(
            apply_to_grid(GeometricTransform::Rot90, &g),
            array![[2, 4], [1, 3]]
        );
    }

    #[test]
    fn identity_returns_grid_unchanged() {
        let g = array![[5.0, -1.0, 0.5], [0.0, 2.0, 9.0]];
        assert_eq!(apply_to_grid(GeometricTransform::Identity, &g), g);
    }

    #[test]
    fn inverses() {
        assert_eq!(
            GeometricTransform::Rot90.inverse(),
            GeometricTransform::Rot270
        );
        assert_eq!(
            GeometricTransform::HFlip.inverse(),
            GeometricTransform::HFlip
        );
        assert_eq!(
            GeometricTransform::Identity.inverse(),
            GeometricTransform::Identity
        );
        for t in GeometricTransform::ALL {
            assert_eq!(t.inverse().inverse(), t);
        }
    }

    #[test]
    fn round_trip_non_square() {
        let g = Array2::from_shape_fn((3, 5), |(r, c)| (r * 10 + c) as i64);
        for t in GeometricTransform::ALL {
            let back = apply_to_grid(t.inverse(), &apply_to_grid(t, &g));
            assert_eq!(back, g, "round trip failed for {t}");
        }
    }

    #[test]
    fn four_rotations_are_identity() {
        let g = Array2::from_shape_fn((4, 7), |(r, c)| (r * 100 + c) as i32);
        let mut out = g.clone();
        for _ in 0..4 {
            out = apply_to_grid(GeometricTransform::Rot90, &out);
        }
        assert_eq!(out, g);
    }

    #[test]
    fn transform_points_examples() {
        let pts = transform_points(GeometricTransform::HFlip, &[(1, 0, 1)], 3, 3).unwrap();
        assert_eq!(pts, vec![(1, 2, 1)]);
        let pts = transform_points(GeometricTransform::Rot180, &[(1, 1, 0)], 3, 3).unwrap();
        assert_eq!(pts, vec![(1, 1, 0)]);
    }

    #[test]
    fn transform_points_rejects_out_of_bounds() {
        let err = transform_points(GeometricTransform::Rot90, &[(3, 0, 1)], 3, 3);
        assert!(err.is_err());
    }

    #[test]
    fn sample_transform_singleton_and_determinism() {
        use rand::SeedableRng;
        let fam = TransformFamily::flip();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_transform(&mut rng, &fam), GeometricTransform::HFlip);
        }

        let fam = TransformFamily::flip_rot();
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let seq_a: Vec<_> = (0..100).map(|_| sample_transform(&mut a, &fam)).collect();
        let seq_b: Vec<_> = (0..100).map(|_| sample_transform(&mut b, &fam)).collect();
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn sample_transform_is_roughly_uniform() {
        use rand::SeedableRng;
        let fam = TransformFamily::flip_rot();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(sample_transform(&mut rng, &fam)).or_insert(0usize) += 1;
        }
        for t in GeometricTransform::ALL {
            let freq = counts[&t] as f64 / draws as f64;
            assert!(
                (0.18..=0.22).contains(&freq),
                "frequency of {t} was {freq}"
            );
        }
    }

    #[test]
    fn empty_family_is_rejected() {
        assert!(TransformFamily::new(vec![]).is_err());
    }

    #[test]
    fn dyn_entry_rejects_low_rank() {
        let g = ArrayD::<f64>::zeros(ndarray::IxDyn(&[4]));
        assert!(apply_transform(GeometricTransform::Rot90, &g).is_err());
    }

    #[test]
    fn serialized_names() {
        for (t, name) in [
            (GeometricTransform::Identity, "\"identity\""),
            (GeometricTransform::Rot90, "\"rot90\""),
            (GeometricTransform::HFlip, "\"hflip\""),
        ] {
            assert_eq!(serde_json::to_string(&t).unwrap(), name);
        }
    }
}
