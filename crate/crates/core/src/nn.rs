//! Parameterized layers and the parameter registry.

use crate::error::TensorError;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Handle to a parameter slot in a [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn key(self) -> usize {
        self.0
    }
}

/// Ordered map of named trainable tensors.
///
/// Names are unique and iteration follows insertion order, so parameter
/// walks (updates, checkpointing, counting) are deterministic.
#[derive(Default)]
pub struct ParamRegistry {
    params: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        tensor.requires_grad = true;
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push((name, tensor));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total element count over all registered tensors.
    pub fn total_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.params {
            t.zero_grad();
        }
    }

    /// Adds the tape's leaf gradients into the matching parameter buffers.
    pub fn accumulate_from(&mut self, tape: &Tape) {
        // Collect first: the tape borrows itself immutably during iteration.
        let grads: Vec<(usize, Vec<f32>)> = tape
            .param_grads()
            .map(|(k, g)| (k, g.to_vec()))
            .collect();
        for (key, g) in grads {
            self.params[key].1.accumulate_grad(&g);
        }
    }
}

/// Samples from N(0, std^2) truncated at two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    let dist = Normal::new(0.0f32, 1.0).expect("valid normal");
    loop {
        let z: f32 = dist.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| trunc_normal(rng, 0.02)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Fully connected layer `y = x W^T + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = reg
            .add(format!("{name}.weight"), init_weight(rng, &[c_out, c_in]))
            .expect("unique name");
        let b = reg
            .add(format!("{name}.bias"), Tensor::zeros(&[c_out]))
            .expect("unique name");
        Self { w, b, c_in, c_out }
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<Var, TensorError> {
        let w = tape.param_leaf(self.w.key(), reg.get(self.w));
        let b = tape.param_leaf(self.b.key(), reg.get(self.b));
        tape.linear(x, w, b)
    }
}

/// 2-D convolution (cross-correlation) over CHW tensors.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = reg
            .add(format!("{name}.weight"), init_weight(rng, &[c_out, c_in, k, k]))
            .expect("unique name");
        let b = reg
            .add(format!("{name}.bias"), Tensor::zeros(&[c_out]))
            .expect("unique name");
        Self {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<Var, TensorError> {
        let w = tape.param_leaf(self.w.key(), reg.get(self.w));
        let b = tape.param_leaf(self.b.key(), reg.get(self.b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Per-token normalization over the channel axis, then affine.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, c: usize) -> Self {
        let gamma = reg
            .add(format!("{name}.gamma"), Tensor::full(&[c], 1.0))
            .expect("unique name");
        let beta = reg
            .add(format!("{name}.beta"), Tensor::zeros(&[c]))
            .expect("unique name");
        Self {
            gamma,
            beta,
            c,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<Var, TensorError> {
        let gamma = tape.param_leaf(self.gamma.key(), reg.get(self.gamma));
        let beta = tape.param_leaf(self.beta.key(), reg.get(self.beta));
        tape.layer_norm(x, gamma, beta, self.eps)
    }
}

pub const FFN_EXPANSION: usize = 4;

/// Two linear layers with a GELU in between; channel count is preserved.
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        let hidden = c * FFN_EXPANSION;
        Self {
            fc1: Linear::new(reg, rng, &format!("{name}.fc1"), c, hidden),
            fc2: Linear::new(reg, rng, &format!("{name}.fc2"), hidden, c),
        }
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(tape, reg, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, reg, h)
    }
}

/// Seeded RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random helper used by tests and data synthesis.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn registry_names_unique_and_ordered() {
        let mut reg = ParamRegistry::new();
        let a = reg.add("a", Tensor::zeros(&[2])).unwrap();
        let b = reg.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(reg.add("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(reg.total_params(), 5);
        assert_eq!(reg.name(a), "a");
        assert_eq!(reg.name(b), "b");
        let names: Vec<&str> = reg.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn empty_registry_counts_zero() {
        assert_eq!(ParamRegistry::new().total_params(), 0);
    }

    #[test]
    fn linear_param_count() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(0);
        let _ = Linear::new(&mut reg, &mut rng, "l", 4, 3);
        assert_eq!(reg.total_params(), 15);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(0);
        let l = Linear::new(&mut reg, &mut rng, "l", 3, 3);
        *reg.get_mut(l.w) = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(&[2, 3], |i| i as f32);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = l.forward(&mut tape, &reg, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        // zero weight, nonzero bias -> rows of bias
        *reg.get_mut(l.w) = Tensor::zeros(&[3, 3]);
        *reg.get_mut(l.b) = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = l.forward(&mut tape, &reg, xv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(7);
        let l = Linear::new(&mut reg, &mut rng, "l", 5, 4);
        *reg.get_mut(l.w) = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        *reg.get_mut(l.b) = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[6, 5], -1.0, 1.0);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = l.forward(&mut tape, &reg, xv).unwrap();
        let got = tape.value(y);

        let w = reg.get(l.w);
        let b = reg.get(l.b);
        for i in 0..6 {
            for o in 0..4 {
                let mut want = b.at(&[o]);
                for c in 0..5 {
                    want += x.at(&[i, c]) * w.at(&[o, c]);
                }
                assert!((got.at(&[i, o]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut reg = ParamRegistry::new();
        let ln = LayerNorm::new(&mut reg, "ln", 8);
        let x = Tensor::from_fn(&[4, 8], |i| ((i * 37 % 11) as f32) - 3.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = ln.forward(&mut tape, &reg, xv).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_beta() {
        let mut reg = ParamRegistry::new();
        let ln = LayerNorm::new(&mut reg, "ln", 4);
        *reg.get_mut(ln.beta) = Tensor::new(vec![4], vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let x = Tensor::full(&[2, 4], 3.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = ln.forward(&mut tape, &reg, xv).unwrap();
        for row in tape.value(y).data().chunks(4) {
            for (got, want) in row.iter().zip(&[0.5, -0.5, 1.0, 0.0]) {
                assert!((got - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(3);
        let ln = LayerNorm::new(&mut reg, "ln", 6);
        *reg.get_mut(ln.gamma) = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        *reg.get_mut(ln.beta) = rand_tensor(&mut rng, &[6], -0.5, 0.5);
        let x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = ln.forward(&mut tape, &reg, xv).unwrap();
        let got = tape.value(y);
        let gamma = reg.get(ln.gamma);
        let beta = reg.get(ln.beta);
        for r in 0..3 {
            let row: Vec<f32> = (0..6).map(|c| x.at(&[r, c])).collect();
            let mean: f32 = row.iter().sum::<f32>() / 6.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 6.0;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..6 {
                let want = (row[c] - mean) * rstd * gamma.at(&[c]) + beta.at(&[c]);
                assert!((got.at(&[r, c]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_stride_divides_evenly() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(0);
        for s in [2usize, 4] {
            let conv = Conv2d::new(&mut reg, &mut rng, &format!("c{s}"), 1, 1, s, s, 0);
            let (oh, ow) = conv.out_hw(16, 16);
            assert_eq!((oh, ow), (16 / s, 16 / s));
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(11);
        let conv = Conv2d::new(&mut reg, &mut rng, "c", 2, 3, 3, 1, 1);
        *reg.get_mut(conv.w) = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        *reg.get_mut(conv.b) = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = conv.forward(&mut tape, &reg, xv).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), &[3, 5, 5]);

        let w = reg.get(conv.w);
        let b = reg.get(conv.b);
        for oc in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut want = b.at(&[oc]);
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                    continue;
                                }
                                want += x.at(&[c, iy as usize, ix as usize]) * w.at(&[oc, c, ky, kx]);
                            }
                        }
                    }
                    let g = got.at(&[oc, oy, ox]);
                    assert!((g - want).abs() < 1e-5, "({oc},{oy},{ox}): {g} vs {want}");
                }
            }
        }
    }

    #[test]
    fn ffn_preserves_channels() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(0);
        let ffn = FeedForward::new(&mut reg, &mut rng, "ffn", 8);
        let x = rand_tensor(&mut rng, &[5, 8], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = ffn.forward(&mut tape, &reg, xv).unwrap();
        assert_eq!(tape.shape(y), &[5, 8]);
    }

    #[test]
    fn forward_is_reproducible() {
        let run = || {
            let mut reg = ParamRegistry::new();
            let mut rng = init_rng(42);
            let l = Linear::new(&mut reg, &mut rng, "l", 6, 6);
            let x = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let y = l.forward(&mut tape, &reg, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grads_flow_into_registry() {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(0);
        let l = Linear::new(&mut reg, &mut rng, "l", 3, 2);
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = l.forward(&mut tape, &reg, xv).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        reg.accumulate_from(&tape);
        assert!(reg.get(l.w).grad.is_some());
        // bias grad of sum loss is the row count
        let bg = reg.get(l.b).grad.as_ref().unwrap();
        for &g in bg {
            assert!((g - 4.0).abs() < 1e-5);
        }
        let _ = ops::sum_all(reg.get(l.w)).unwrap();
    }
}
