//! Convolution primitives on channel-first `(C, H, W)` grids.
//!
//! Convolutions are lowered to matrix products via im2col, so the heavy
//! lifting runs through the BLAS-style kernels behind `ndarray::dot`.
//! All routines are single-threaded and deterministic.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((cin * k * k, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    {
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..cin {
            for kr in 0..k {
                for kc in 0..k {
                    let row = (ci * k + kr) * k + kc;
                    let row_base = row * oh * ow;
                    for or_ in 0..oh {
                        let ir = (or_ * stride + kr) as isize - pad as isize;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        let x_base = ci * h * w + ir as usize * w;
                        let out_base = row_base + or_ * ow;
                        for oc in 0..ow {
                            let ic = (oc * stride + kc) as isize - pad as isize;
                            if ic < 0 || ic >= w as isize {
                                continue;
                            }
                            cs[out_base + oc] = xs[x_base + ic as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut x = Array3::<f64>::zeros((cin, h, w));
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..cin {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let row_base = row * oh * ow;
                for or_ in 0..oh {
                    let ir = (or_ * stride + kr) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ir as usize * w;
                    let out_base = row_base + or_ * ow;
                    for oc in 0..ow {
                        let ic = (oc * stride + kc) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        xs[x_base + ic as usize] += cs[out_base + oc];
                    }
                }
            }
        }
    }
    x
}

/// `z = W * x + b`, with `W` of shape `(c_out, c_in, k, k)`.
pub fn conv_forward(
    x: &Array3<f64>,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let (cout, wcin, k, _) = weight.dim();
    debug_assert_eq!(cin, wcin);
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);

    let cols = im2col(x, k, stride, pad);
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weight");
    let mut z = w_mat.dot(&cols);
    for (mut row, &b) in z.rows_mut().into_iter().zip(bias.iter()) {
        row += b;
    }
    z.into_shape_with_order((cout, oh, ow))
        .expect("conv output reshape")
}

/// Gradients of a convolution: `(dx, dw, db)` given the upstream gradient on
/// the pre-activation output.
pub fn conv_backward(
    x: &Array3<f64>,
    weight: &Array4<f64>,
    grad_out: &Array3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let (gc, goh, gow) = grad_out.dim();
    debug_assert_eq!(gc, cout);

    let cols = im2col(x, k, stride, pad);
    let g_mat = grad_out
        .view()
        .into_shape_with_order((cout, goh * gow))
        .expect("contiguous grad");

    let dw_mat = g_mat.dot(&cols.t());
    let dw = dw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("weight grad reshape");
    let db = g_mat.sum_axis(Axis(1));

    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weight");
    let dcols = w_mat.t().dot(&g_mat);
    let dx = col2im(&dcols, cin, h, w, k, stride, pad);
    (dx, dw, db)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, r, cc)| x[[ci, r / 2, cc / 2]])
}

/// Backward of [`upsample2`]: sums the gradient over each 2x2 block.
pub fn upsample2_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for r in 0..h2 {
            for cc in 0..w2 {
                out[[ci, r / 2, cc / 2]] += grad[[ci, r, cc]];
            }
        }
    }
    out
}

/// In-place ReLU; returns the activated array.
pub fn relu(mut x: Array3<f64>) -> Array3<f64> {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    x
}

/// Masks `grad` by the ReLU derivative taken at `pre` (the pre-activation).
pub fn relu_backward(pre: &Array3<f64>, grad: &Array3<f64>) -> Array3<f64> {
    let mut out = grad.clone();
    ndarray::Zip::from(&mut out).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}
