//! Slice-level compute kernels.
//!
//! Every kernel comes in a `_seq` variant and, with the `parallel` feature, a
//! `_par` variant that distributes independent output rows/channels over
//! rayon. Both variants share the same per-row inner function, so results are
//! bitwise identical regardless of thread count or feature selection. The
//! unsuffixed entry points dispatch on problem size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations the rayon spawn overhead dominates.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 16 * 1024;

#[cfg(feature = "parallel")]
#[inline]
fn use_par(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

#[inline]
fn matmul_row(a_row: &[f32], b: &[f32], k: usize, n: usize, out_row: &mut [f32]) {
    out_row.fill(0.0);
    for (p, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f32], b: &[f32], _m: usize, k: usize, n: usize, out: &mut [f32]) {
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, k, n, row));
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(m * k * n) {
        return matmul_par(a, b, m, k, n, out);
    }
    matmul_seq(a, b, m, k, n, out);
}

#[inline]
fn matmul_nt_row(a_row: &[f32], b: &[f32], k: usize, n: usize, out_row: &mut [f32]) {
    for j in 0..n {
        let b_row = &b[j * k..j * k + k];
        let mut acc = 0.0f32;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        out_row[j] = acc;
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T (row-by-row dot products)
pub fn matmul_nt_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f32], b: &[f32], _m: usize, k: usize, n: usize, out: &mut [f32]) {
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_nt_row(&a[i * k..(i + 1) * k], b, k, n, row));
}

pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(m * k * n) {
        return matmul_nt_par(a, b, m, k, n, out);
    }
    matmul_nt_seq(a, b, m, k, n, out);
}

#[inline]
fn matmul_tn_row(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, r: usize, out_row: &mut [f32]) {
    out_row.fill(0.0);
    for i in 0..m {
        let av = a[i * k + r];
        let b_row = &b[i * n..i * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for r in 0..k {
        matmul_tn_row(a, b, m, k, n, r, &mut out[r * n..(r + 1) * n]);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| matmul_tn_row(a, b, m, k, n, r, row));
}

pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(m * k * n) {
        return matmul_tn_par(a, b, m, k, n, out);
    }
    matmul_tn_seq(a, b, m, k, n, out);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn unary_map_seq(x: &[f32], out: &mut [f32], f: impl Fn(f32) -> f32) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = f(v);
    }
}

#[cfg(feature = "parallel")]
pub fn unary_map_par(x: &[f32], out: &mut [f32], f: impl Fn(f32) -> f32 + Sync) {
    out.par_iter_mut()
        .zip(x.par_iter())
        .for_each(|(o, &v)| *o = f(v));
}

pub fn unary_map(x: &[f32], out: &mut [f32], f: impl Fn(f32) -> f32 + Sync) {
    #[cfg(feature = "parallel")]
    if use_par(x.len()) {
        return unary_map_par(x, out, f);
    }
    unary_map_seq(x, out, f);
}

pub fn zip_map_seq(a: &[f32], b: &[f32], out: &mut [f32], f: impl Fn(f32, f32) -> f32) {
    for i in 0..out.len() {
        out[i] = f(a[i], b[i]);
    }
}

#[cfg(feature = "parallel")]
pub fn zip_map_par(a: &[f32], b: &[f32], out: &mut [f32], f: impl Fn(f32, f32) -> f32 + Sync) {
    out.par_iter_mut()
        .enumerate()
        .for_each(|(i, o)| *o = f(a[i], b[i]));
}

pub fn zip_map(a: &[f32], b: &[f32], out: &mut [f32], f: impl Fn(f32, f32) -> f32 + Sync) {
    #[cfg(feature = "parallel")]
    if use_par(out.len()) {
        return zip_map_par(a, b, out, f);
    }
    zip_map_seq(a, b, out, f);
}

// ---------------------------------------------------------------------------
// Softmax over contiguous rows
// ---------------------------------------------------------------------------

#[inline]
fn softmax_row(x: &[f32], out: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn softmax_rows_seq(x: &[f32], cols: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(xr, or);
    }
}

#[cfg(feature = "parallel")]
pub fn softmax_rows_par(x: &[f32], cols: usize, out: &mut [f32]) {
    out.par_chunks_exact_mut(cols)
        .enumerate()
        .for_each(|(i, or)| softmax_row(&x[i * cols..(i + 1) * cols], or));
}

pub fn softmax_rows(x: &[f32], cols: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(x.len()) {
        return softmax_rows_par(x, cols, out);
    }
    softmax_rows_seq(x, cols, out);
}

// ---------------------------------------------------------------------------
// Layer norm over contiguous rows
// ---------------------------------------------------------------------------

#[inline]
pub fn row_mean_var(x: &[f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

#[inline]
fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let (mean, var) = row_mean_var(x);
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
}

pub fn layer_norm_rows_seq(x: &[f32], cols: usize, gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        layer_norm_row(xr, gamma, beta, eps, or);
    }
}

#[cfg(feature = "parallel")]
pub fn layer_norm_rows_par(x: &[f32], cols: usize, gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    out.par_chunks_exact_mut(cols)
        .enumerate()
        .for_each(|(i, or)| layer_norm_row(&x[i * cols..(i + 1) * cols], gamma, beta, eps, or));
}

pub fn layer_norm_rows(x: &[f32], cols: usize, gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(x.len()) {
        return layer_norm_rows_par(x, cols, gamma, beta, eps, out);
    }
    layer_norm_rows_seq(x, cols, gamma, beta, eps, out);
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation), CHW layout
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv2d_out_channel(
    x: &[f32],
    w_oc: &[f32],
    bias: f32,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out_ch: &mut [f32],
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = bias;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            for c in 0..c_in {
                let xc = &x[c * h * w..(c + 1) * h * w];
                let wc = &w_oc[c * k * k..(c + 1) * k * k];
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let wrow = &wc[ky * k..(ky + 1) * k];
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += xrow[ix as usize] * wrow[kx];
                    }
                }
            }
            out_ch[oy * ow + ox] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_seq(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    for oc in 0..c_out {
        conv2d_out_channel(
            x,
            &weight[oc * c_in * k * k..(oc + 1) * c_in * k * k],
            bias[oc],
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut out[oc * oh * ow..(oc + 1) * oh * ow],
        );
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_par(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    _c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, out_ch)| {
        conv2d_out_channel(
            x,
            &weight[oc * c_in * k * k..(oc + 1) * c_in * k * k],
            bias[oc],
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
            out_ch,
        )
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    #[cfg(feature = "parallel")]
    if use_par(c_out * oh * ow * c_in * k * k) {
        return conv2d_par(x, weight, bias, c_in, h, w, c_out, k, stride, pad, oh, ow, out);
    }
    conv2d_seq(x, weight, bias, c_in, h, w, c_out, k, stride, pad, oh, ow, out);
}

// ---------------------------------------------------------------------------
// Average pooling, CHW layout
// ---------------------------------------------------------------------------

#[inline]
fn avg_pool_channel(xc: &[f32], _h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize, out_ch: &mut [f32]) {
    let inv = 1.0 / (k * k) as f32;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f32;
            for ky in 0..k {
                let row = &xc[(oy * s + ky) * w..];
                for kx in 0..k {
                    acc += row[ox * s + kx];
                }
            }
            out_ch[oy * ow + ox] = acc * inv;
        }
    }
}

pub fn avg_pool2d_seq(x: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize, out: &mut [f32]) {
    for ch in 0..c {
        avg_pool_channel(&x[ch * h * w..(ch + 1) * h * w], h, w, k, s, oh, ow, &mut out[ch * oh * ow..(ch + 1) * oh * ow]);
    }
}

#[cfg(feature = "parallel")]
pub fn avg_pool2d_par(x: &[f32], _c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize, out: &mut [f32]) {
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ch, out_ch)| avg_pool_channel(&x[ch * h * w..(ch + 1) * h * w], h, w, k, s, oh, ow, out_ch));
}

pub fn avg_pool2d(x: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(c * oh * ow * k * k) {
        return avg_pool2d_par(x, c, h, w, k, s, oh, ow, out);
    }
    avg_pool2d_seq(x, c, h, w, k, s, oh, ow, out);
}

// ---------------------------------------------------------------------------
// Bilinear resize, CHW layout, half-pixel centers
// ---------------------------------------------------------------------------

/// Per-axis source taps: (low index, high index, weight of high tap).
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = (o as f32 + 0.5) * scale - 0.5;
            let src = src.max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let t = if hi > lo { src - lo as f32 } else { 0.0 };
            (lo, hi, t.clamp(0.0, 1.0))
        })
        .collect()
}

#[inline]
fn bilinear_row(
    xc: &[f32],
    w_in: usize,
    ytap: (usize, usize, f32),
    xtaps: &[(usize, usize, f32)],
    out_row: &mut [f32],
) {
    let (y0, y1, ty) = ytap;
    let row0 = &xc[y0 * w_in..y0 * w_in + w_in];
    let row1 = &xc[y1 * w_in..y1 * w_in + w_in];
    for (o, &(x0, x1, tx)) in out_row.iter_mut().zip(xtaps) {
        let top = row0[x0] + (row0[x1] - row0[x0]) * tx;
        let bot = row1[x0] + (row1[x1] - row1[x0]) * tx;
        *o = top + (bot - top) * ty;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_seq(x: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f32]) {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            bilinear_row(xc, w, ytaps[oy], &xtaps, &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow]);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn bilinear_resize_par(x: &[f32], _c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f32]) {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    out.par_chunks_mut(ow).enumerate().for_each(|(i, out_row)| {
        let ch = i / oh;
        let oy = i % oh;
        bilinear_row(&x[ch * h * w..(ch + 1) * h * w], w, ytaps[oy], &xtaps, out_row);
    });
}

pub fn bilinear_resize(x: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f32]) {
    #[cfg(feature = "parallel")]
    if use_par(c * oh * ow * 4) {
        return bilinear_resize_par(x, c, h, w, oh, ow, out);
    }
    bilinear_resize_seq(x, c, h, w, oh, ow, out);
}
