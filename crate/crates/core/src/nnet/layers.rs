//! Layer primitives with explicit forward and backward passes.
//!
//! Feature maps are `Array4<f64>` in (batch, channel, height, width)
//! order; convolution weights are (out, in, kh, kw). Convolutions run
//! as im2col + matrix multiply, parallelized over the batch with
//! deterministic (batch-order) gradient reduction.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;

pub const BN_EPS: f64 = 1e-5;

/// Spatial output size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample into patch columns of shape (C*kh*kw, Ho*Wo).
fn im2col(x: ArrayView3<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let mut cols = Array2::zeros((c * kernel * kernel, ho * wo));
    let x_flat = x.as_slice().expect("contiguous input");
    let cols_flat = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let out_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + ii as usize) * w;
                    let dst_row = out_base + oi * wo;
                    // First/last valid output column for this kernel tap.
                    let oj_lo = if kj >= pad {
                        0
                    } else {
                        (pad - kj).div_ceil(stride)
                    };
                    let oj_hi_excl = {
                        // need oj*stride + kj - pad <= w-1
                        let max_j = w + pad;
                        if kj >= max_j {
                            0
                        } else {
                            (((max_j - 1 - kj) / stride) + 1).min(wo)
                        }
                    };
                    if oj_lo >= oj_hi_excl {
                        continue;
                    }
                    let src_start = (oj_lo * stride + kj) as isize - pad as isize;
                    debug_assert!(src_start >= 0);
                    let mut src = src_row + src_start as usize;
                    if stride == 1 {
                        let n = oj_hi_excl - oj_lo;
                        cols_flat[dst_row + oj_lo..dst_row + oj_lo + n]
                            .copy_from_slice(&x_flat[src..src + n]);
                    } else {
                        for dst in cols_flat[dst_row + oj_lo..dst_row + oj_hi_excl].iter_mut() {
                            *dst = x_flat[src];
                            src += stride;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back onto the input (transpose of
/// im2col).
fn col2im(
    dcols: &Array2<f64>,
    shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let mut dx = Array3::zeros((c, h, w));
    let dcols_flat = dcols.as_slice().expect("contiguous cols");
    let dx_flat = dx.as_slice_mut().expect("contiguous dx");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let col_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ii as usize) * w;
                    let src_row = col_base + oi * wo;
                    let oj_lo = if kj >= pad {
                        0
                    } else {
                        (pad - kj).div_ceil(stride)
                    };
                    let oj_hi_excl = {
                        let max_j = w + pad;
                        if kj >= max_j {
                            0
                        } else {
                            (((max_j - 1 - kj) / stride) + 1).min(wo)
                        }
                    };
                    if oj_lo >= oj_hi_excl {
                        continue;
                    }
                    let dst_start = (oj_lo * stride + kj) as isize - pad as isize;
                    debug_assert!(dst_start >= 0);
                    let mut dst = dst_row + dst_start as usize;
                    for &g in &dcols_flat[src_row + oj_lo..src_row + oj_hi_excl] {
                        dx_flat[dst] += g;
                        dst += stride;
                    }
                }
            }
        }
    }
    dx
}

/// Convolution forward: y = w * x + b.
pub fn conv_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (batch, _, h, wd) = x.dim();
    let (c_out, c_in, kernel, _) = w.dim();
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(wd, kernel, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((c_out, c_in * kernel * kernel))
        .expect("contiguous weights");

    let outputs: Vec<Array3<f64>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(x.index_axis(Axis(0), bi), kernel, stride, pad);
            let mut y = w_mat.dot(&cols);
            for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            y.into_shape_with_order((c_out, ho, wo)).expect("shape")
        })
        .collect();

    let mut out = Array4::zeros((batch, c_out, ho, wo));
    for (bi, y) in outputs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&y);
    }
    out
}

/// Convolution backward. Per-sample weight gradients are reduced in
/// batch order, keeping results independent of thread scheduling.
pub fn conv_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    pad: usize,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (batch, c_in, h, wd) = x.dim();
    let (c_out, _, kernel, _) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let w_mat = w
        .view()
        .into_shape_with_order((c_out, c_in * kernel * kernel))
        .expect("contiguous weights");

    let per_sample: Vec<(Array3<f64>, Array2<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(x.index_axis(Axis(0), bi), kernel, stride, pad);
            let dy_mat = dy
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c_out, ho * wo))
                .expect("contiguous dy");
            let dw = dy_mat.dot(&cols.t());
            let dcols = w_mat.t().dot(&dy_mat);
            let dx = col2im(&dcols, (c_in, h, wd), kernel, stride, pad);
            (dx, dw)
        })
        .collect();

    let mut dx = Array4::zeros(x.dim());
    let mut dw_mat = Array2::zeros((c_out, c_in * kernel * kernel));
    for (bi, (dxb, dwb)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), bi).assign(&dxb);
        dw_mat += &dwb;
    }
    let dw = dw_mat
        .into_shape_with_order((c_out, c_in, kernel, kernel))
        .expect("shape");
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    (dx, dw, db)
}

/// Per-channel mean and (biased) variance statistics.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch-norm forward. In train mode the batch statistics are computed
/// and returned (the caller folds them into the running estimates); in
/// eval mode the provided running statistics are used.
pub fn bn_forward(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    stats: &BnStats,
) -> Array4<f64> {
    let mut y = x.clone();
    for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let inv = 1.0 / (stats.var[c] + BN_EPS).sqrt();
        let (m, g, b) = (stats.mean[c], gamma[c], beta[c]);
        plane.mapv_inplace(|v| (v - m) * inv * g + b);
    }
    y
}

/// Batch statistics of a feature map over (batch, height, width).
pub fn bn_batch_stats(x: &Array4<f64>) -> BnStats {
    let c = x.dim().1;
    let n = (x.len() / c) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
        let m: f64 = plane.iter().sum::<f64>() / n;
        let v: f64 = plane.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / n;
        mean[ci] = m;
        var[ci] = v;
    }
    BnStats { mean, var }
}

/// Batch-norm backward (train mode, batch statistics).
pub fn bn_backward(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    stats: &BnStats,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let c = x.dim().1;
    let n = (x.len() / c) as f64;
    let mut dx = Array4::zeros(x.dim());
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let inv = 1.0 / (stats.var[ci] + BN_EPS).sqrt();
        let m = stats.mean[ci];
        let xs = x.index_axis(Axis(1), ci);
        let dys = dy.index_axis(Axis(1), ci);

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (&xv, &dv) in xs.iter().zip(dys.iter()) {
            let xhat = (xv - m) * inv;
            sum_dy += dv;
            sum_dy_xhat += dv * xhat;
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;

        let g = gamma[ci];
        let mut dxs = dx.index_axis_mut(Axis(1), ci);
        for ((dxv, &xv), &dv) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
            let xhat = (xv - m) * inv;
            *dxv = g * inv * (dv - sum_dy / n - xhat * sum_dy_xhat / n);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU backward given the pre-activation.
pub fn relu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Global average pooling: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x
                .index_axis(Axis(0), bi)
                .index_axis(Axis(0), ci)
                .iter()
                .sum::<f64>()
                / n;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    input_shape: (usize, usize, usize, usize),
    dy: &Array2<f64>,
) -> Array4<f64> {
    let (b, c, h, w) = input_shape;
    let n = (h * w) as f64;
    let mut dx = Array4::zeros(input_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] / n;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Dense forward: y = x w^T + b, with x of shape (B, in).
pub fn dense_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
        row += b;
    }
    y
}

pub fn dense_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean cross-entropy over the batch plus its gradient w.r.t. logits.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> (f64, Array2<f64>, Array2<f64>) {
    let probs = softmax(logits);
    let b = logits.nrows();
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (bi, &label) in labels.iter().enumerate() {
        loss -= probs[[bi, label]].max(1e-300).ln();
        dlogits[[bi, label]] -= 1.0;
    }
    loss /= b as f64;
    dlogits.mapv_inplace(|v| v / b as f64);
    (loss, probs, dlogits)
}
