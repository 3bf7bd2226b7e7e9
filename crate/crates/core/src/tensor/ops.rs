//! Pure forward operations on [`Tensor`].
//!
//! These are the building blocks recorded by the tape; they are also usable
//! directly wherever no gradient is needed (inference resizing, metrics,
//! data synthesis). Every op validates shapes and rejects non-finite
//! outputs.

use super::kernels;
use super::{broadcast_shape, Tensor};
use crate::error::TensorError;

fn ensure_finite(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

/// `a[m,k] * b[k,n]`, or batched `a[bs,m,k] * b[bs,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => {
            let mut out = Tensor::zeros(&[*m, *n]);
            kernels::matmul(a.data(), b.data(), *m, *k, *n, out.data_mut());
            ensure_finite("matmul", out)
        }
        ([bs, m, k], [bs2, k2, n]) if bs == bs2 && k == k2 => {
            let mut out = Tensor::zeros(&[*bs, *m, *n]);
            for i in 0..*bs {
                kernels::matmul(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    *m,
                    *k,
                    *n,
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                );
            }
            ensure_finite("matmul", out)
        }
        _ => Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

/// `x[n,c_in] * w[c_out,c_in]^T + b[c_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let ([n, c_in], [c_out, c_in2]) = (x.shape(), w.shape()) else {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    };
    let (n, c_in, c_out, c_in2) = (*n, *c_in, *c_out, *c_in2);
    if c_in != c_in2 || b.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, c_out]);
    kernels::matmul_nt(x.data(), w.data(), n, c_in, c_out, out.data_mut());
    let bias = b.data();
    for row in out.data_mut().chunks_exact_mut(c_out) {
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
    ensure_finite("linear", out)
}

// ---------------------------------------------------------------------------
// Elementwise with trailing broadcast
// ---------------------------------------------------------------------------

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32 + Sync) -> Result<Tensor, TensorError> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let mut out = Tensor::zeros(&out_shape);
    if a.shape() == b.shape() {
        kernels::zip_map(a.data(), b.data(), out.data_mut(), f);
    } else if b.numel() == 1 {
        let bv = b.data()[0];
        kernels::unary_map(a.data(), out.data_mut(), |av| f(av, bv));
    } else if a.numel() == 1 {
        let av = a.data()[0];
        kernels::unary_map(b.data(), out.data_mut(), |bv| f(av, bv));
    } else if out_shape == a.shape() && is_suffix(b.shape(), a.shape()) {
        let bn = b.numel();
        let bd = b.data();
        let ad = a.data();
        let data = out.data_mut();
        for (chunk_i, chunk) in data.chunks_exact_mut(bn).enumerate() {
            let a_chunk = &ad[chunk_i * bn..(chunk_i + 1) * bn];
            for i in 0..bn {
                chunk[i] = f(a_chunk[i], bd[i]);
            }
        }
    } else {
        broadcast_walk(a, b, &out_shape, out.data_mut(), f);
    }
    ensure_finite(op, out)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Strides padded to `rank`, with zero stride on broadcast (size-1) dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_walk(a: &Tensor, b: &Tensor, out_shape: &[usize], out: &mut [f32], f: impl Fn(f32, f32) -> f32) {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(ad[ia], bd[ib]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, c: f32) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(x.shape());
    kernels::unary_map(x.data(), out.data_mut(), |v| v * c);
    ensure_finite("scale", out)
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(x.shape());
    kernels::unary_map(x.data(), out.data_mut(), sigmoid_scalar);
    ensure_finite("sigmoid", out)
}

pub fn gelu(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(x.shape());
    kernels::unary_map(x.data(), out.data_mut(), gelu_scalar);
    ensure_finite("gelu", out)
}

pub fn exp(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(x.shape());
    kernels::unary_map(x.data(), out.data_mut(), f32::exp);
    ensure_finite("exp", out)
}

pub fn log(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(x.shape());
    kernels::unary_map(x.data(), out.data_mut(), f32::ln);
    ensure_finite("log", out)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "softmax",
            axis,
            rank,
        });
    }
    let mut out = Tensor::zeros(x.shape());
    if axis == rank - 1 {
        let cols = x.shape()[axis];
        kernels::softmax_rows(x.data(), cols, out.data_mut());
    } else {
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let outer: usize = x.shape()[..axis].iter().product();
        let xd = x.data();
        let od = out.data_mut();
        let mut lane = vec![0.0f32; len];
        let mut soft = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = xd[base + j * inner];
                }
                kernels::softmax_rows_seq(&lane, len, &mut soft);
                for (j, &s) in soft.iter().enumerate() {
                    od[base + j * inner] = s;
                }
            }
        }
    }
    ensure_finite("softmax", out)
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
    x.clone().reshaped(shape)
}

/// Materializing axis permutation.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank
        && axes.iter().all(|&a| {
            if a >= rank || seen[a] {
                false
            } else {
                seen[a] = true;
                true
            }
        });
    if !valid {
        return Err(TensorError::InvalidArgument {
            op: "permute",
            msg: format!("axes {axes:?} is not a permutation of 0..{rank}"),
        });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // stride of output dim d in the input buffer
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in od.iter_mut() {
        *o = xd[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += gather_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= gather_strides[d] * out_shape[d];
        }
    }
    Ok(out)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
    let first = xs.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut ax_total = 0;
    for x in xs {
        if x.rank() != rank
            || x.shape()[..axis] != first.shape()[..axis]
            || x.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        ax_total += x.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = ax_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let out_row = ax_total * inner;
    for o in 0..outer {
        let mut offset = 0;
        for x in xs {
            let ax = x.shape()[axis];
            let src = &x.data()[o * ax * inner..(o + 1) * ax * inner];
            od[o * out_row + offset..o * out_row + offset + ax * inner].copy_from_slice(src);
            offset += ax * inner;
        }
    }
    Ok(out)
}

/// `len` elements along `axis` starting at `start`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "slice",
            axis,
            rank,
        });
    }
    let ax = x.shape()[axis];
    if start + len > ax {
        return Err(TensorError::InvalidArgument {
            op: "slice",
            msg: format!("range {start}..{} exceeds extent {ax}", start + len),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let src = &x.data()[(o * ax + start) * inner..(o * ax + start + len) * inner];
        od[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(out)
}

/// Splits into equal chunks along `axis`.
pub fn split(x: &Tensor, axis: usize, parts: usize) -> Result<Vec<Tensor>, TensorError> {
    let ax = *x.shape().get(axis).ok_or(TensorError::InvalidAxis {
        op: "split",
        axis,
        rank: x.rank(),
    })?;
    if parts == 0 || ax % parts != 0 {
        return Err(TensorError::InvalidArgument {
            op: "split",
            msg: format!("extent {ax} not divisible into {parts} parts"),
        });
    }
    let chunk = ax / parts;
    (0..parts).map(|i| slice(x, axis, i * chunk, chunk)).collect()
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "sum",
            axis,
            rank,
        });
    }
    let len = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        for j in 0..len {
            let base = (o * len + j) * inner;
            let dst = &mut od[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&xd[base..base + inner]) {
                *d += v;
            }
        }
    }
    ensure_finite("sum", out)
}

pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let len = *x.shape().get(axis).ok_or(TensorError::InvalidAxis {
        op: "mean",
        axis,
        rank: x.rank(),
    })? as f32;
    scale(&sum_axis(x, axis)?, 1.0 / len)
}

pub fn sum_all(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut acc = 0.0f32;
    for &v in x.data() {
        acc += v;
    }
    ensure_finite("sum", Tensor::scalar(acc))
}

pub fn mean_all(x: &Tensor) -> Result<Tensor, TensorError> {
    scale(&sum_all(x)?, 1.0 / x.numel() as f32)
}

// ---------------------------------------------------------------------------
// Spatial ops (CHW, or HW treated as a single channel)
// ---------------------------------------------------------------------------

fn chw(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected rank 2 or 3, got shape {:?}", x.shape()),
        }),
    }
}

pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let ([c_in, h, w], [c_out, c_in2, k, k2]) = (x.shape(), weight.shape()) else {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    };
    let (c_in, h, w, c_out, c_in2, k, k2) = (*c_in, *h, *w, *c_out, *c_in2, *k, *k2);
    if c_in != c_in2 || k != k2 || bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: format!("degenerate output for input {h}x{w}, k={k}, stride={stride}, pad={pad}"),
        });
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    kernels::conv2d(
        x.data(),
        weight.data(),
        bias.data(),
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        pad,
        oh,
        ow,
        out.data_mut(),
    );
    ensure_finite("conv2d", out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
    let cols = *x.shape().last().ok_or(TensorError::InvalidArgument {
        op: "layer_norm",
        msg: "rank-0 input".into(),
    })?;
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    kernels::layer_norm_rows(x.data(), cols, gamma.data(), beta.data(), eps, out.data_mut());
    ensure_finite("layer_norm", out)
}

pub fn avg_pool2d(x: &Tensor, k: usize, s: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = chw(x, "avg_pool2d")?;
    if k == 0 || s == 0 || h < k || w < k {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2d",
            msg: format!("window {k}/{s} too large for {h}x{w}"),
        });
    }
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    kernels::avg_pool2d(x.data(), c, h, w, k, s, oh, ow, out.data_mut());
    if x.rank() == 2 {
        out = out.reshaped(&[oh, ow])?;
    }
    ensure_finite("avg_pool2d", out)
}

pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = chw(x, "bilinear_resize")?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            msg: "zero output extent".into(),
        });
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    kernels::bilinear_resize(x.data(), c, h, w, oh, ow, out.data_mut());
    if x.rank() == 2 {
        out = out.reshaped(&[oh, ow])?;
    }
    ensure_finite("bilinear_resize", out)
}

/// Nearest-neighbor resize; used to map predicted masks back to source dims.
pub fn nearest_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = chw(x, "nearest_resize")?;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    {
        let od = out.data_mut();
        let xd = x.data();
        for ch in 0..c {
            for oy in 0..oh {
                let sy = ((oy as f32 + 0.5) * h as f32 / oh as f32) as usize;
                let sy = sy.min(h - 1);
                for ox in 0..ow {
                    let sx = ((ox as f32 + 0.5) * w as f32 / ow as f32) as usize;
                    let sx = sx.min(w - 1);
                    od[(ch * oh + oy) * ow + ox] = xd[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    if x.rank() == 2 {
        out = out.reshaped(&[oh, ow])?;
    }
    Ok(out)
}
