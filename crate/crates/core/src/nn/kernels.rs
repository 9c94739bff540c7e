//! Dense kernels shared by the tape's forward and backward passes.
//!
//! Feature maps are single-sample `[C, H, W]` arrays in standard layout.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Unfold `x` into a `[C*k*k, Ho*Wo]` column matrix for a square kernel.
pub fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let cols_slice = cols.as_slice_mut().expect("fresh array is contiguous");
    let ncol = ho * wo;
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols_slice[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = plane.row(iy as usize);
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold a column matrix back onto a `[C, H, W]` grid, summing overlaps.
pub fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[[iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// `weight` is `[O, C, k, k]`, `bias` is `[O]`.
pub fn conv2d(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (o, c, k, _) = weight.dim();
    let (_, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let wmat = weight.to_shape((o, c * k * k)).expect("weight reshape");
    let out = if k == 1 && stride == 1 && pad == 0 {
        let xm = x.to_shape((c, h * w)).expect("input reshape");
        wmat.dot(&xm)
    } else {
        let cols = im2col(x, k, stride, pad);
        wmat.dot(&cols)
    };
    let mut out = out
        .into_shape_with_order((o, ho, wo))
        .expect("output reshape");
    if let Some(b) = bias {
        for (mut plane, &bv) in out.outer_iter_mut().zip(b) {
            plane += bv;
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and weight, computed only on request.
pub fn conv2d_backward(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    grad_out: ArrayView3<f64>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Array3<f64>>, Option<Array2<f64>>) {
    let (o, c, k, _) = weight.dim();
    let (_, h, w) = x.dim();
    let (_, ho, wo) = grad_out.dim();
    let gout = grad_out.to_shape((o, ho * wo)).expect("grad reshape");
    let pointwise = k == 1 && stride == 1 && pad == 0;
    let gw = if want_weight {
        if pointwise {
            let xm = x.to_shape((c, h * w)).expect("input reshape");
            Some(gout.dot(&xm.t()))
        } else {
            let cols = im2col(x, k, stride, pad);
            Some(gout.dot(&cols.t()))
        }
    } else {
        None
    };
    let gx = if want_input {
        let wmat = weight.to_shape((o, c * k * k)).expect("weight reshape");
        let gcols = wmat.t().dot(&gout);
        if pointwise {
            Some(gcols.into_shape_with_order((c, h, w)).expect("reshape"))
        } else {
            Some(col2im(gcols.view(), c, h, w, k, stride, pad))
        }
    } else {
        None
    };
    (gx, gw)
}

/// Transposed convolution with a 2x2 kernel and stride 2. `weight` is `[C, O, 2, 2]`.
pub fn conv_transpose2x2(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    bias: Option<&[f64]>,
) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let o = weight.dim().1;
    let xm = x.to_shape((c, h * w)).expect("input reshape");
    let wm = weight.to_shape((c, o * 4)).expect("weight reshape");
    let y = wm.t().dot(&xm);
    let mut out = Array3::<f64>::zeros((o, 2 * h, 2 * w));
    for oc in 0..o {
        let bv = bias.map_or(0.0, |b| b[oc]);
        for a in 0..2 {
            for b in 0..2 {
                let row = y.row(oc * 4 + a * 2 + b);
                let mut dst = out.slice_mut(s![oc, a..;2, b..;2]);
                for (d, &v) in dst.iter_mut().zip(row.iter()) {
                    *d = v + bv;
                }
            }
        }
    }
    out
}

pub fn conv_transpose2x2_backward(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    grad_out: ArrayView3<f64>,
    want_input: bool,
    want_weight: bool,
) -> (Option<Array3<f64>>, Option<Array2<f64>>) {
    let (c, h, w) = x.dim();
    let o = weight.dim().1;
    let mut gy = Array2::<f64>::zeros((o * 4, h * w));
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let src = grad_out.slice(s![oc, a..;2, b..;2]);
                let mut row = gy.row_mut(oc * 4 + a * 2 + b);
                for (d, &v) in row.iter_mut().zip(src.iter()) {
                    *d = v;
                }
            }
        }
    }
    let gx = if want_input {
        let wm = weight.to_shape((c, o * 4)).expect("weight reshape");
        Some(
            wm.dot(&gy)
                .into_shape_with_order((c, h, w))
                .expect("reshape"),
        )
    } else {
        None
    };
    let gw = if want_weight {
        let xm = x.to_shape((c, h * w)).expect("input reshape");
        Some(xm.dot(&gy.t()))
    } else {
        None
    };
    (gx, gw)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// `tanh` through a single `exp`; noticeably faster than `f64::tanh` here.
pub fn tanh(x: f64) -> f64 {
    let e = (2.0 * x.abs()).exp();
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// In-place softmax over one lane.
pub fn softmax_lane(mut lane: ndarray::ArrayViewMut1<f64>) {
    let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    lane.mapv_inplace(|v| (v - max).exp());
    let sum = lane.sum();
    lane /= sum;
}
