//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every differentiable operation pushes one node holding its output value
//! and the identity of its inputs. `backward` walks the nodes in exact
//! reverse execution order, accumulating gradients additively across fan-out.
//! A tape belongs to a single forward pass: it is reset between steps and
//! refuses a second backward. Tapes are not `Sync`; confine each to one
//! thread. Kernels invoked inside an op may still parallelize internally.

use super::kernels;
use super::{broadcast_shape, ops, Tensor};
use crate::error::TensorError;
use std::collections::HashMap;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Softmax { x: Var, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    AvgPool2d { x: Var, k: usize, s: usize },
    BilinearResize { x: Var },
    CrossEntropy2 { logits: Var, target: Tensor },
    BceWithLogits { logits: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bind: HashMap<usize, Var>,
    backward_done: bool,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and gradients; the tape can record again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_bind.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    /// Gradient of the last backward pass, if this node participated.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    /// Leaves computed after backward, keyed by the caller's parameter key.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.param_bind.iter().filter_map(move |(&key, &var)| {
            self.grad(var).map(|g| (key, g))
        })
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    /// Records an input. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter, deduplicated per tape by `key` so that
    /// layers shared between the two streams bind once and fan out.
    pub fn param_leaf(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.param_bind.get(&key) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.param_bind.insert(key, v);
        v
    }

    // -- recorded ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var, TensorError> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = ops::softmax(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var, TensorError> {
        let out = ops::scale(self.value(x), c)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Scale { x, c }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::sigmoid(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Sigmoid { x }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::gelu(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gelu { x }, ng))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::exp(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Exp { x }, ng))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::log(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Log { x }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = ops::reshape(self.value(x), shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let out = ops::permute(self.value(x), axes)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&tensors, axis)?;
        let ng = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = ops::slice(self.value(x), axis, start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = ops::sum_axis(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SumAxis { x, axis }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = ops::mean_axis(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::sum_all(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SumAll { x }, ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = ops::mean_all(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanAll { x }, ng))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var, TensorError> {
        let out = ops::avg_pool2d(self.value(x), k, s)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool2d { x, k, s }, ng))
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let out = ops::bilinear_resize(self.value(x), oh, ow)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::BilinearResize { x }, ng))
    }

    /// Two-class cross-entropy of `logits [2,H,W]` against a 0/1 target map,
    /// averaged over pixels. Computed via log-sum-exp.
    pub fn cross_entropy_2class(&mut self, logits: Var, target: &Tensor) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let ([two, h, w], [th, tw]) = (lv.shape(), target.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        };
        let (two, h, w, th, tw) = (*two, *h, *w, *th, *tw);
        if two != 2 || th != h || tw != w {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = h * w;
        let ld = lv.data();
        let td = target.data();
        let mut acc = 0.0f64;
        for p in 0..n {
            let l0 = ld[p];
            let l1 = ld[n + p];
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let lt = if td[p] >= 0.5 { l1 } else { l0 };
            acc += f64::from(lse - lt);
        }
        let out = Tensor::scalar((acc / n as f64) as f32);
        let out = if out.is_finite() {
            out
        } else {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        };
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy2 {
                logits,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets
    /// in [0,1], computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: lv.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (&x, &t) in lv.data().iter().zip(target.data()) {
            let v = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            acc += f64::from(v);
        }
        let out = Tensor::scalar((acc / lv.numel() as f64) as f32);
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_with_logits" });
        }
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            ng,
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Propagates d(loss)/d(node) to every grad-requiring node, in exact
    /// reverse execution order. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_node = &self.nodes[loss.idx()];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.idx()] = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.dispatch_backward(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.idx()].needs_grad {
            return;
        }
        let numel = self.nodes[v.idx()].value.numel();
        let slot = &mut self.grads[v.idx()];
        let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn dispatch_backward(&mut self, i: usize, gout: &[f32]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => self.backward_matmul(a, b, gout),
            Op::Linear { x, w, b } => self.backward_linear(x, w, b, gout),
            Op::Conv2d { x, w, b, stride, pad } => self.backward_conv2d(x, w, b, stride, pad, gout),
            Op::LayerNorm { x, gamma, beta, eps } => self.backward_layer_norm(x, gamma, beta, eps, gout),
            Op::Softmax { x, axis } => self.backward_softmax(i, x, axis, gout),
            Op::Add { a, b } => {
                self.accumulate_reduced(a, gout, i);
                self.accumulate_reduced(b, gout, i);
            }
            Op::Sub { a, b } => {
                self.accumulate_reduced(a, gout, i);
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                self.accumulate_reduced(b, &neg, i);
            }
            Op::Mul { a, b } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let da = mul_into_shape(self.value(b), gout, &out_shape);
                self.accumulate_reduced(a, &da, i);
                let db = mul_into_shape(self.value(a), gout, &out_shape);
                self.accumulate_reduced(b, &db, i);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = gout.iter().map(|g| g * c).collect();
                self.accumulate(x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<f32> = gout.iter().zip(y).map(|(g, &yv)| g * yv * (1.0 - yv)).collect();
                self.accumulate(x, &dx);
            }
            Op::Gelu { x } => {
                let xv = self.value(x).data();
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * ops::gelu_deriv_scalar(v))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Exp { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<f32> = gout.iter().zip(y).map(|(g, &yv)| g * yv).collect();
                self.accumulate(x, &dx);
            }
            Op::Log { x } => {
                let xv = self.value(x).data();
                let dx: Vec<f32> = gout.iter().zip(xv).map(|(g, &v)| g / v).collect();
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => self.accumulate(x, gout),
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                let g = Tensor::new(self.nodes[i].value.shape().to_vec(), gout.to_vec()).unwrap();
                let gp = ops::permute(&g, &inv).unwrap();
                self.accumulate(x, gp.data());
            }
            Op::Concat { xs, axis } => {
                let extents: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
                let g = Tensor::new(self.nodes[i].value.shape().to_vec(), gout.to_vec()).unwrap();
                let mut start = 0;
                for (&v, &ext) in xs.iter().zip(&extents) {
                    let piece = ops::slice(&g, axis, start, ext).unwrap();
                    self.accumulate(v, piece.data());
                    start += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(x).to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (ax_in, ax_out) = (xs[axis], os[axis]);
                let mut dx = vec![0.0f32; self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * ax_in + start) * inner;
                    let src = o * ax_out * inner;
                    for j in 0..ax_out * inner {
                        dx[dst + j] += gout[src + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SumAxis { x, axis } => self.backward_sum_axis(x, axis, gout, 1.0),
            Op::MeanAxis { x, axis } => {
                let len = self.shape(x)[axis] as f32;
                self.backward_sum_axis(x, axis, gout, 1.0 / len);
            }
            Op::SumAll { x } => {
                let dx = vec![gout[0]; self.value(x).numel()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.value(x).numel();
                let dx = vec![gout[0] / n as f32; n];
                self.accumulate(x, &dx);
            }
            Op::AvgPool2d { x, k, s } => self.backward_avg_pool(i, x, k, s, gout),
            Op::BilinearResize { x } => self.backward_bilinear(i, x, gout),
            Op::CrossEntropy2 { logits, target } => self.backward_cross_entropy(logits, &target, gout[0]),
            Op::BceWithLogits { logits, target } => self.backward_bce(logits, &target, gout[0]),
        }
    }

    /// Accumulates an output-shaped gradient into a possibly broadcast input.
    fn accumulate_reduced(&mut self, v: Var, gout: &[f32], out_node: usize) {
        if !self.nodes[v.idx()].needs_grad {
            return;
        }
        let vshape = self.shape(v).to_vec();
        let oshape = self.nodes[out_node].value.shape().to_vec();
        if vshape == oshape {
            self.accumulate(v, gout);
            return;
        }
        let reduced = reduce_to_shape(gout, &oshape, &vshape);
        self.accumulate(v, &reduced);
    }

    fn backward_matmul(&mut self, a: Var, b: Var, gout: &[f32]) {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bs, m, k, n) = match (ashape.as_slice(), bshape.as_slice()) {
            ([m, k], [_, n]) => (1usize, *m, *k, *n),
            ([bs, m, k], [_, _, n]) => (*bs, *m, *k, *n),
            _ => unreachable!("validated at record time"),
        };
        let (ad, bd) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
        if self.needs(a) {
            let mut da = vec![0.0f32; bs * m * k];
            for s in 0..bs {
                kernels::matmul_nt(
                    &gout[s * m * n..(s + 1) * m * n],
                    &bd[s * k * n..(s + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut da[s * m * k..(s + 1) * m * k],
                );
            }
            self.accumulate(a, &da);
        }
        if self.needs(b) {
            let mut db = vec![0.0f32; bs * k * n];
            for s in 0..bs {
                kernels::matmul_tn(
                    &ad[s * m * k..(s + 1) * m * k],
                    &gout[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut db[s * k * n..(s + 1) * k * n],
                );
            }
            self.accumulate(b, &db);
        }
    }

    fn backward_linear(&mut self, x: Var, w: Var, b: Var, gout: &[f32]) {
        let [n, c_in] = *self.shape(x) else { unreachable!() };
        let c_out = self.shape(w)[0];
        let (xd, wd) = (self.value(x).data().to_vec(), self.value(w).data().to_vec());
        if self.needs(x) {
            let mut dx = vec![0.0f32; n * c_in];
            kernels::matmul(gout, &wd, n, c_out, c_in, &mut dx);
            self.accumulate(x, &dx);
        }
        if self.needs(w) {
            let mut dw = vec![0.0f32; c_out * c_in];
            kernels::matmul_tn(gout, &xd, n, c_out, c_in, &mut dw);
            self.accumulate(w, &dw);
        }
        if self.needs(b) {
            let mut db = vec![0.0f32; c_out];
            for row in gout.chunks_exact(c_out) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            self.accumulate(b, &db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, gout: &[f32]) {
        let [c_in, h, win] = *self.shape(x) else { unreachable!() };
        let [c_out, _, k, _] = *self.shape(w) else { unreachable!() };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (win + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data().to_vec();
        let wd = self.value(w).data().to_vec();

        if self.needs(b) {
            let mut db = vec![0.0f32; c_out];
            for (oc, d) in db.iter_mut().enumerate() {
                *d = gout[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
            }
            self.accumulate(b, &db);
        }
        if self.needs(w) {
            let mut dw = vec![0.0f32; c_out * c_in * k * k];
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gout[(oc * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    dw[((oc * c_in + c) * k + ky) * k + kx] +=
                                        g * xd[(c * h + iy as usize) * win + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(w, &dw);
        }
        if self.needs(x) {
            let mut dx = vec![0.0f32; c_in * h * win];
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gout[(oc * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    dx[(c * h + iy as usize) * win + ix as usize] +=
                                        g * wd[((oc * c_in + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(x, &dx);
        }
    }

    fn backward_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32, gout: &[f32]) {
        let cols = *self.shape(x).last().unwrap();
        let rows = self.value(x).numel() / cols;
        let xd = self.value(x).data().to_vec();
        let gd = self.value(gamma).data().to_vec();

        let mut dgamma = vec![0.0f32; cols];
        let mut dbeta = vec![0.0f32; cols];
        let mut dx = vec![0.0f32; rows * cols];
        let mut xhat = vec![0.0f32; cols];
        let mut gvec = vec![0.0f32; cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let gr = &gout[r * cols..(r + 1) * cols];
            let (mean, var) = kernels::row_mean_var(xr);
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                xhat[c] = (xr[c] - mean) * rstd;
                gvec[c] = gr[c] * gd[c];
                dgamma[c] += gr[c] * xhat[c];
                dbeta[c] += gr[c];
            }
            let mean_g: f32 = gvec.iter().sum::<f32>() / cols as f32;
            let mean_gx: f32 = gvec.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f32>() / cols as f32;
            for c in 0..cols {
                dx[r * cols + c] = rstd * (gvec[c] - mean_g - xhat[c] * mean_gx);
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }

    fn backward_softmax(&mut self, i: usize, x: Var, axis: usize, gout: &[f32]) {
        let shape = self.nodes[i].value.shape().to_vec();
        let y = self.nodes[i].value.data();
        let rank = shape.len();
        let mut dx = vec![0.0f32; y.len()];
        if axis == rank - 1 {
            let cols = shape[axis];
            for r in 0..y.len() / cols {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &gout[r * cols..(r + 1) * cols];
                let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
        } else {
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            for o in 0..outer {
                for ii in 0..inner {
                    let base = o * len * inner + ii;
                    let mut dot = 0.0f32;
                    for j in 0..len {
                        dot += y[base + j * inner] * gout[base + j * inner];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (gout[idx] - dot);
                    }
                }
            }
        }
        self.accumulate(x, &dx);
    }

    fn backward_sum_axis(&mut self, x: Var, axis: usize, gout: &[f32], factor: f32) {
        let xs = self.shape(x).to_vec();
        let len = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut dx = vec![0.0f32; self.value(x).numel()];
        for o in 0..outer {
            for j in 0..len {
                let dst = (o * len + j) * inner;
                let src = o * inner;
                for t in 0..inner {
                    dx[dst + t] = gout[src + t] * factor;
                }
            }
        }
        self.accumulate(x, &dx);
    }

    fn backward_avg_pool(&mut self, i: usize, x: Var, k: usize, s: usize, gout: &[f32]) {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => unreachable!(),
        };
        let os = self.nodes[i].value.shape();
        let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
        let inv = 1.0 / (k * k) as f32;
        let mut dx = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[(ch * oh + oy) * ow + ox] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            dx[(ch * h + oy * s + ky) * w + ox * s + kx] += g;
                        }
                    }
                }
            }
        }
        self.accumulate(x, &dx);
    }

    fn backward_bilinear(&mut self, i: usize, x: Var, gout: &[f32]) {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => unreachable!(),
        };
        let os = self.nodes[i].value.shape();
        let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
        let ytaps = kernels::bilinear_taps(h, oh);
        let xtaps = kernels::bilinear_taps(w, ow);
        let mut dx = vec![0.0f32; c * h * w];
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                let (y0, y1, ty) = ytaps[oy];
                for ox in 0..ow {
                    let (x0, x1, tx) = xtaps[ox];
                    let g = gout[(ch * oh + oy) * ow + ox];
                    dx[base + y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                    dx[base + y0 * w + x1] += g * (1.0 - ty) * tx;
                    dx[base + y1 * w + x0] += g * ty * (1.0 - tx);
                    dx[base + y1 * w + x1] += g * ty * tx;
                }
            }
        }
        self.accumulate(x, &dx);
    }

    fn backward_cross_entropy(&mut self, logits: Var, target: &Tensor, g: f32) {
        let shape = self.shape(logits).to_vec();
        let n = shape[1] * shape[2];
        let ld = self.value(logits).data();
        let td = target.data();
        let scale = g / n as f32;
        let mut dl = vec![0.0f32; 2 * n];
        for p in 0..n {
            let l0 = ld[p];
            let l1 = ld[n + p];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            let fg = td[p] >= 0.5;
            dl[p] = (p0 - if fg { 0.0 } else { 1.0 }) * scale;
            dl[n + p] = (p1 - if fg { 1.0 } else { 0.0 }) * scale;
        }
        self.accumulate(logits, &dl);
    }

    fn backward_bce(&mut self, logits: Var, target: &Tensor, g: f32) {
        let ld = self.value(logits).data();
        let n = ld.len();
        let scale = g / n as f32;
        let dl: Vec<f32> = ld
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (ops::sigmoid_scalar(x) - t) * scale)
            .collect();
        self.accumulate(logits, &dl);
    }
}

/// Multiplies `factor` (broadcast to `out_shape`) elementwise with `gout`.
fn mul_into_shape(factor: &Tensor, gout: &[f32], out_shape: &[usize]) -> Vec<f32> {
    if factor.shape() == out_shape {
        return factor.data().iter().zip(gout).map(|(a, g)| a * g).collect();
    }
    let g = Tensor::new(out_shape.to_vec(), gout.to_vec()).unwrap();
    ops::mul(factor, &g).unwrap().into_data()
}

/// Sums an `out_shape` gradient down to `target_shape` (inverse broadcast).
fn reduce_to_shape(grad: &[f32], out_shape: &[usize], target_shape: &[usize]) -> Vec<f32> {
    debug_assert!(broadcast_shape("reduce", out_shape, target_shape).is_ok());
    let target_numel: usize = target_shape.iter().product();
    if target_numel == 1 {
        return vec![grad.iter().sum()];
    }
    let rank = out_shape.len();
    // stride of each out dim inside the target buffer (0 where broadcast)
    let offset = rank - target_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..target_shape.len()).rev() {
        strides[offset + i] = if target_shape[i] == 1 { 0 } else { acc };
        acc *= target_shape[i];
    }
    let mut out = vec![0.0f32; target_numel];
    let mut coords = vec![0usize; rank];
    let mut t = 0usize;
    for &g in grad {
        out[t] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            t += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            t -= strides[d] * out_shape[d];
        }
    }
    out
}
