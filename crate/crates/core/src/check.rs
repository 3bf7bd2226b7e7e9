//! Named self-check suites runnable from the CLI.
//!
//! Each check returns a detail string on failure; the CLI prints one line
//! per check and exits nonzero if any fails. The gradient checks compare
//! reverse-mode results against central finite differences.

use crate::attention::{attention, SimulFlowBlock};
use crate::config::{AttentionConfig, MaskMode, ModelConfig, Variant};
use crate::data::{generate_sequence, random_scene, SynthParams};
use crate::decoder::{binarize, segmentation_loss};
use crate::mask::BinaryMask;
use crate::model::Model;
use crate::nn::{init_rng, rand_tensor, ParamRegistry};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ops, Tensor};
use rand::Rng;

pub const GRAD_REL_TOL: f32 = 1e-3;
pub const GRAD_ABS_FLOOR: f32 = 1e-5;
/// Probe step for whole-model checks.
pub const FD_STEP: f32 = 1e-3;
/// Probe step for single-op checks: large enough that f32 forward rounding
/// does not drown the difference, small enough to keep truncation in budget.
pub const OP_FD_STEP: f32 = 1e-2;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Invariants,
    Formats,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grad" => Ok(Self::Grad),
            "invariants" => Ok(Self::Invariants),
            "formats" => Ok(Self::Formats),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite {other:?}")),
        }
    }
}

type CheckFn = fn() -> Result<(), String>;

fn checks_for(suite: Suite) -> Vec<(&'static str, CheckFn)> {
    let invariants: Vec<(&'static str, CheckFn)> = vec![
        ("softmax.rows_sum", check_softmax_rows_sum),
        ("softmax.shift_invariance", check_softmax_shift_invariance),
        ("attn.decomposition", check_decomposition),
        ("attn.motion_isolation", check_motion_isolation),
        ("attn.mask_saturation", check_mask_saturation),
        ("attn.mask_halving", check_mask_halving),
        ("attn.modulated_rows_sum", check_modulated_rows_sum),
        ("attn.self_equivalence", check_self_equivalence),
        ("encoder.grid_schedule", check_grid_schedule),
        ("binarize.tie", check_binarize_tie),
        ("loss.reassembly", check_loss_reassembly),
    ];
    let grad: Vec<(&'static str, CheckFn)> = vec![
        ("grad.ops", check_op_gradients),
        ("grad.end_to_end", check_end_to_end_gradients),
    ];
    let formats: Vec<(&'static str, CheckFn)> = vec![
        ("io.tsr_roundtrip", check_tsr_roundtrip),
        ("io.checkpoint_roundtrip", check_checkpoint_roundtrip),
        ("io.pnm_roundtrip", check_pnm_roundtrip),
    ];
    match suite {
        Suite::Grad => grad,
        Suite::Invariants => invariants,
        Suite::Formats => formats,
        Suite::All => invariants.into_iter().chain(grad).chain(formats).collect(),
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckOutcome> {
    checks_for(suite)
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(()) => CheckOutcome {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Invariant checks
// ---------------------------------------------------------------------------

fn check_softmax_rows_sum() -> Result<(), String> {
    let mut rng = init_rng(100);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[7, 9], -30.0, 30.0);
        let y = ops::softmax(&x, 1).map_err(|e| e.to_string())?;
        for (r, row) in y.data().chunks(9).enumerate() {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(format!("row {r} sums to {s}"));
            }
        }
    }
    Ok(())
}

fn check_softmax_shift_invariance() -> Result<(), String> {
    let mut rng = init_rng(101);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[4, 6], -5.0, 5.0);
        let c: f32 = rng.gen_range(-50.0..50.0);
        let shifted = ops::add(&x, &Tensor::scalar(c)).map_err(|e| e.to_string())?;
        let a = ops::softmax(&x, 1).map_err(|e| e.to_string())?;
        let b = ops::softmax(&shifted, 1).map_err(|e| e.to_string())?;
        for (u, v) in a.data().iter().zip(b.data()) {
            if (u - v).abs() > 1e-6 {
                return Err(format!("shift by {c} changed softmax by {}", (u - v).abs()));
            }
        }
    }
    Ok(())
}

/// Attention over concatenated [image; motion] keys must equal the sum of
/// the two split paths: softmax weights column-split into W_II and W_IO,
/// then W_II V_I + W_IO V_O computed independently.
pub fn decomposition_gap(seed: u64) -> Result<f32, String> {
    let cfg = AttentionConfig {
        channels: 16,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: true,
        mask_enabled: false,
        mask_mode: MaskMode::Soft,
    };
    let mut reg = ParamRegistry::new();
    let mut rng = init_rng(seed);
    let block = SimulFlowBlock::new(&mut reg, &mut rng, "b", cfg);
    let (h, w) = (4, 4);
    let i_t = rand_tensor(&mut rng, &[h * w, 16], -1.0, 1.0);
    let o_t = rand_tensor(&mut rng, &[h * w, 16], -1.0, 1.0);
    let s = rand_tensor(&mut rng, &[h, w], -1.0, 1.0);

    let mut tape = Tape::new();
    let iv = tape.leaf(i_t.clone());
    let ov = tape.leaf(o_t.clone());
    let sv = tape.leaf(s);
    let (_, _, internals) = block
        .simulflow_attention(&mut tape, &reg, iv, ov, sv, h, w)
        .map_err(|e| e.to_string())?;
    let weights = tape.value(internals.image_weights).clone();

    // concatenated-key route
    let (q_i, k_i, v_i) = block.project_qkv(&mut tape, &reg, iv, h, w).map_err(|e| e.to_string())?;
    let (_, k_o, v_o) = {
        let ov2 = tape.leaf(o_t);
        block.project_qkv(&mut tape, &reg, ov2, h, w).map_err(|e| e.to_string())?
    };
    let k_u = tape.concat(&[k_i, k_o], 1).map_err(|e| e.to_string())?;
    let v_u = tape.concat(&[v_i, v_o], 1).map_err(|e| e.to_string())?;
    let concat_route = attention(&mut tape, q_i, k_u, v_u).map_err(|e| e.to_string())?;
    let concat_vals = tape.value(concat_route).clone();

    // split route: per-head explicit W_II V_I + W_IO V_O
    let n = h * w;
    let heads = 2;
    let d = 8;
    let vi = tape.value(v_i).clone();
    let vo = tape.value(v_o).clone();
    let mut split_vals = vec![0.0f32; n * heads * d];
    for hh in 0..heads {
        for q in 0..n {
            for c in 0..d {
                let mut acc = 0.0f32;
                for m in 0..n {
                    acc += weights.at(&[hh, q, m]) * vi.at(&[hh, m, c]);
                }
                for m in 0..n {
                    acc += weights.at(&[hh, q, n + m]) * vo.at(&[hh, m, c]);
                }
                split_vals[q * heads * d + hh * d + c] = acc;
            }
        }
    }

    let mut max_abs = 0.0f32;
    for (idx, &want) in split_vals.iter().enumerate() {
        let got = concat_vals.data()[idx];
        max_abs = max_abs.max((got - want).abs());
    }
    Ok(max_abs)
}

fn check_decomposition() -> Result<(), String> {
    for seed in 0..20u64 {
        let gap = decomposition_gap(seed)?;
        if gap > 1e-5 {
            return Err(format!("seed {seed}: max-abs gap {gap}"));
        }
    }
    Ok(())
}

fn check_motion_isolation() -> Result<(), String> {
    let (model, reg) = Model::build_variant(Variant::Tiny, 21);
    let mut rng = init_rng(22);
    let flow = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let run = |img: &Tensor| -> Result<Vec<Vec<f32>>, String> {
        let mut tape = Tape::new();
        let pyr = model.encode(&mut tape, &reg, img, &flow).map_err(|e| e.to_string())?;
        Ok(pyr
            .stages
            .iter()
            .map(|st| tape.value(st.o_tokens).data().to_vec())
            .collect())
    };
    let a = run(&rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0))?;
    let b = run(&rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0))?;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if x != y {
            return Err(format!("stage {} motion tokens differ across image inputs", i + 1));
        }
    }
    Ok(())
}

fn saturation_gap() -> Result<f32, String> {
    let cfg = AttentionConfig {
        channels: 8,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: true,
        mask_enabled: true,
        mask_mode: MaskMode::Soft,
    };
    let mut rng = init_rng(23);
    let i = rand_tensor(&mut rng, &[16, 8], -1.0, 1.0);
    let o = rand_tensor(&mut rng, &[16, 8], -1.0, 1.0);
    let run = |mask_enabled: bool, s_val: f32| -> Result<Vec<f32>, String> {
        let cfg = AttentionConfig { mask_enabled, ..cfg };
        let mut reg = ParamRegistry::new();
        let mut r = init_rng(24);
        let block = SimulFlowBlock::new(&mut reg, &mut r, "b", cfg);
        let mut tape = Tape::new();
        let iv = tape.leaf(i.clone());
        let ov = tape.leaf(o.clone());
        let sv = tape.leaf(Tensor::full(&[4, 4], s_val));
        let (i_out, _, _) = block
            .simulflow_attention(&mut tape, &reg, iv, ov, sv, 4, 4)
            .map_err(|e| e.to_string())?;
        Ok(tape.value(i_out).data().to_vec())
    };
    let saturated = run(true, 100.0)?;
    let unmasked = run(false, 0.0)?;
    Ok(saturated
        .iter()
        .zip(&unmasked)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max))
}

fn check_mask_saturation() -> Result<(), String> {
    let gap = saturation_gap()?;
    if gap > 1e-5 {
        return Err(format!("saturated mask deviates from unmasked attention by {gap}"));
    }
    Ok(())
}

fn check_mask_halving() -> Result<(), String> {
    let cfg = AttentionConfig {
        channels: 8,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: true,
        mask_enabled: true,
        mask_mode: MaskMode::Soft,
    };
    let mut reg = ParamRegistry::new();
    let mut rng = init_rng(25);
    let block = SimulFlowBlock::new(&mut reg, &mut rng, "b", cfg);
    let mut tape = Tape::new();
    let iv = tape.leaf(rand_tensor(&mut rng, &[16, 8], -1.0, 1.0));
    let ov = tape.leaf(rand_tensor(&mut rng, &[16, 8], -1.0, 1.0));
    let sv = tape.leaf(Tensor::zeros(&[4, 4]));
    let (_, _, tr) = block
        .simulflow_attention(&mut tape, &reg, iv, ov, sv, 4, 4)
        .map_err(|e| e.to_string())?;
    let raw = tape.value(tr.image_logits_raw).data();
    let modulated = tape.value(tr.image_logits).data();
    for (r, m) in raw.iter().zip(modulated) {
        if (r * 0.5 - m).abs() > 1e-6 {
            return Err(format!("zero mask: expected logits halved, got {r} -> {m}"));
        }
    }
    Ok(())
}

fn check_modulated_rows_sum() -> Result<(), String> {
    let cfg = AttentionConfig {
        channels: 8,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: true,
        mask_enabled: true,
        mask_mode: MaskMode::Soft,
    };
    let mut reg = ParamRegistry::new();
    let mut rng = init_rng(26);
    let block = SimulFlowBlock::new(&mut reg, &mut rng, "b", cfg);
    let mut tape = Tape::new();
    let iv = tape.leaf(rand_tensor(&mut rng, &[16, 8], -2.0, 2.0));
    let ov = tape.leaf(rand_tensor(&mut rng, &[16, 8], -2.0, 2.0));
    let sv = tape.leaf(rand_tensor(&mut rng, &[4, 4], -3.0, 3.0));
    let (_, _, tr) = block
        .simulflow_attention(&mut tape, &reg, iv, ov, sv, 4, 4)
        .map_err(|e| e.to_string())?;
    let w = tape.value(tr.image_weights);
    let cols = w.shape()[2];
    for row in w.data().chunks(cols) {
        let s: f32 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("modulated softmax row sums to {s}"));
        }
    }
    Ok(())
}

fn check_self_equivalence() -> Result<(), String> {
    let cfg = AttentionConfig {
        channels: 8,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: false,
        mask_enabled: false,
        mask_mode: MaskMode::Soft,
    };
    let mut reg = ParamRegistry::new();
    let mut rng = init_rng(27);
    let block = SimulFlowBlock::new(&mut reg, &mut rng, "b", cfg);
    let i = rand_tensor(&mut rng, &[16, 8], -1.0, 1.0);
    let o = rand_tensor(&mut rng, &[16, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let iv = tape.leaf(i.clone());
    let ov = tape.leaf(o);
    let sv = tape.leaf(Tensor::zeros(&[4, 4]));
    let (i_out, _, _) = block
        .simulflow_attention(&mut tape, &reg, iv, ov, sv, 4, 4)
        .map_err(|e| e.to_string())?;
    let iv2 = tape.leaf(i);
    let (q, k, v) = block.project_qkv(&mut tape, &reg, iv2, 4, 4).map_err(|e| e.to_string())?;
    let a = attention(&mut tape, q, k, v).map_err(|e| e.to_string())?;
    let want = block.proj.forward(&mut tape, &reg, a).map_err(|e| e.to_string())?;
    let got = tape.value(i_out).data();
    let exp = tape.value(want).data();
    for (g, e) in got.iter().zip(exp) {
        if (g - e).abs() > 1e-6 {
            return Err("image branch with cross disabled is not pure self-attention".into());
        }
    }
    Ok(())
}

fn check_grid_schedule() -> Result<(), String> {
    let cfg = ModelConfig::variant(Variant::Small);
    for hw in [64usize, 128, 256, 512] {
        for (i, div) in [4usize, 8, 16, 32].iter().enumerate() {
            let got = cfg.stage_grid(i, hw, hw);
            if got != (hw / div, hw / div) {
                return Err(format!("stage {} grid for {hw}: {got:?}", i + 1));
            }
        }
    }
    Ok(())
}

/// Tie-break contract of `binarize`, parameterized so tests can inject a
/// broken implementation and watch this check catch it.
pub fn check_binarize_tie_impl(f: impl Fn(&Tensor) -> BinaryMask) -> Result<(), String> {
    let tied = Tensor::full(&[2, 3, 3], 0.42);
    if !f(&tied).is_empty_mask() {
        return Err("tied logits must resolve to background".into());
    }
    let mut data = vec![0.0f32; 2 * 4];
    data[4..].fill(1.0);
    let fg = Tensor::new(vec![2, 2, 2], data).unwrap();
    if f(&fg).count_ones() != 4 {
        return Err("strictly larger foreground logit must win".into());
    }
    Ok(())
}

fn check_binarize_tie() -> Result<(), String> {
    check_binarize_tie_impl(binarize)
}

fn check_loss_reassembly() -> Result<(), String> {
    let (model, reg) = Model::build_variant(Variant::Tiny, 30);
    let mut rng = init_rng(31);
    let img = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let flow = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let mut tape = Tape::new();
    let (logits, pyr) = model.forward(&mut tape, &reg, &img, &flow).map_err(|e| e.to_string())?;
    let mut gt = BinaryMask::zeros(32, 32);
    for y in 8..20 {
        for x in 8..20 {
            gt.set(y, x, 1);
        }
    }
    let bundle = segmentation_loss(&mut tape, logits, &pyr, &gt, 0.1).map_err(|e| e.to_string())?;
    let v = bundle.values(&tape);
    let recomposed = v.main + 0.1 * v.aux.iter().sum::<f32>();
    if (v.total - recomposed).abs() > 1e-7 {
        return Err(format!("total {} != reassembled {}", v.total, recomposed));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Compares the tape gradient of `loss = sum(w ⊙ build(inputs))` against
/// central finite differences for each input marked differentiable.
///
/// The probe loss itself is accumulated in f64 from the op output so the
/// finite difference is not drowned in f32 summation noise; backward runs
/// through the recorded f32 graph as usual.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, crate::error::TensorError>,
) -> Result<(), String> {
    let probe_weight = |i: usize| ((i * 37 % 13) as f32 - 6.0) / 7.0;

    let loss_of = |values: &[Tensor]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).map_err(|e| format!("{name}: {e}"))?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(probe_weight(i)) * f64::from(v))
            .sum())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let out = build(&mut tape, &vars).map_err(|e| format!("{name}: {e}"))?;
    let w = Tensor::from_fn(tape.shape(out), probe_weight);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).map_err(|e| format!("{name}: {e}"))?;
    let loss = tape.sum_all(prod).map_err(|e| format!("{name}: {e}"))?;
    tape.backward(loss).map_err(|e| format!("{name}: {e}"))?;
    let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect();

    for (ti, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for ei in 0..inputs[ti].numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += OP_FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= OP_FD_STEP;
            let fd = ((loss_of(&plus)? - loss_of(&minus)?) / (2.0 * f64::from(OP_FD_STEP))) as f32;
            let got = grad[ei];
            let err = (got - fd).abs();
            if err > GRAD_ABS_FLOOR && err / got.abs().max(fd.abs()) > GRAD_REL_TOL {
                return Err(format!(
                    "{name}: input {ti} elem {ei}: tape {got} vs fd {fd} (err {err})"
                ));
            }
        }
    }
    Ok(())
}

fn check_op_gradients() -> Result<(), String> {
    let mut rng = init_rng(40);
    let r = &mut rng;

    grad_check("matmul", &[rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
        &|t, v| { let a = v[0]; let b = v[1]; t.matmul(a, b) })?;
    grad_check("matmul_batched", &[rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 4, 2], -1.0, 1.0)],
        &|t, v| t.matmul(v[0], v[1]))?;
    grad_check("linear", &[rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[5, 4], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)],
        &|t, v| t.linear(v[0], v[1], v[2]))?;
    grad_check("conv2d", &[rand_tensor(r, &[2, 5, 5], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 3], -0.5, 0.5), rand_tensor(r, &[3], -0.5, 0.5)],
        &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1))?;
    grad_check("layer_norm", &[rand_tensor(r, &[3, 6], -2.0, 2.0), rand_tensor(r, &[6], 0.5, 1.5), rand_tensor(r, &[6], -0.5, 0.5)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6))?;
    grad_check("softmax", &[rand_tensor(r, &[4, 5], -2.0, 2.0)], &|t, v| t.softmax(v[0], 1))?;
    grad_check("sigmoid", &[rand_tensor(r, &[7], -3.0, 3.0)], &|t, v| t.sigmoid(v[0]))?;
    grad_check("gelu", &[rand_tensor(r, &[9], -3.0, 3.0)], &|t, v| t.gelu(v[0]))?;
    grad_check("exp", &[rand_tensor(r, &[6], -1.0, 1.0)], &|t, v| t.exp(v[0]))?;
    grad_check("log", &[rand_tensor(r, &[6], 0.5, 3.0)], &|t, v| t.log(v[0]))?;
    grad_check("add_broadcast", &[rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)],
        &|t, v| t.add(v[0], v[1]))?;
    grad_check("sub", &[rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
        &|t, v| t.sub(v[0], v[1]))?;
    grad_check("mul_broadcast", &[rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)],
        &|t, v| t.mul(v[0], v[1]))?;
    grad_check("scale", &[rand_tensor(r, &[5], -1.0, 1.0)], &|t, v| t.scale(v[0], -1.7))?;
    grad_check("permute", &[rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], &|t, v| t.permute(v[0], &[2, 0, 1]))?;
    grad_check("reshape", &[rand_tensor(r, &[2, 6], -1.0, 1.0)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    grad_check("concat", &[rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 2], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1]], 1))?;
    grad_check("slice", &[rand_tensor(r, &[3, 5], -1.0, 1.0)], &|t, v| t.slice(v[0], 1, 1, 3))?;
    grad_check("sum_axis", &[rand_tensor(r, &[3, 4], -1.0, 1.0)], &|t, v| t.sum_axis(v[0], 0))?;
    grad_check("mean_axis", &[rand_tensor(r, &[3, 4], -1.0, 1.0)], &|t, v| t.mean_axis(v[0], 1))?;
    grad_check("mean_all", &[rand_tensor(r, &[6], -1.0, 1.0)], &|t, v| t.mean_all(v[0]))?;
    grad_check("avg_pool2d", &[rand_tensor(r, &[2, 4, 4], -1.0, 1.0)], &|t, v| t.avg_pool2d(v[0], 2, 2))?;
    grad_check("bilinear_up", &[rand_tensor(r, &[2, 3, 3], -1.0, 1.0)], &|t, v| t.bilinear_resize(v[0], 5, 7))?;
    grad_check("bilinear_down", &[rand_tensor(r, &[1, 6, 6], -1.0, 1.0)], &|t, v| t.bilinear_resize(v[0], 3, 3))?;

    let gt2 = Tensor::from_fn(&[4, 4], |i| (i % 2) as f32);
    grad_check("cross_entropy", &[rand_tensor(r, &[2, 4, 4], -2.0, 2.0)],
        &move |t, v| t.cross_entropy_2class(v[0], &gt2))?;
    let soft_t = Tensor::from_fn(&[3, 3], |i| (i as f32) / 9.0);
    grad_check("bce_with_logits", &[rand_tensor(r, &[3, 3], -2.0, 2.0)],
        &move |t, v| t.bce_with_logits(v[0], &soft_t))?;
    Ok(())
}

/// Evaluates the training loss in f64 from an f32 forward pass, so central
/// differences at small steps are not limited by f32 scalar resolution.
fn precise_loss(
    model: &Model,
    reg: &ParamRegistry,
    image: &Tensor,
    flow_rgb: &Tensor,
    gt: &BinaryMask,
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let (logits, pyr) = model
        .forward(&mut tape, reg, image, flow_rgb)
        .map_err(|e| e.to_string())?;
    let lv = tape.value(logits);
    let [_, h, w] = *lv.shape() else { unreachable!() };
    let n = h * w;
    let ld = lv.data();
    let gt_t = gt.to_tensor();

    let mut main = 0.0f64;
    for p in 0..n {
        let (l0, l1) = (f64::from(ld[p]), f64::from(ld[n + p]));
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        main += lse - if gt_t.data()[p] >= 0.5 { l1 } else { l0 };
    }
    main /= n as f64;

    let mut aux_sum = 0.0f64;
    for stage in &pyr.stages {
        let factor = h / stage.h;
        let target = if factor > 1 {
            ops::avg_pool2d(&gt_t, factor, factor).map_err(|e| e.to_string())?
        } else {
            gt_t.clone()
        };
        let sd = tape.value(stage.mask_logits).data();
        let mut acc = 0.0f64;
        for (&x, &t) in sd.iter().zip(target.data()) {
            let (x, t) = (f64::from(x), f64::from(t));
            acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        aux_sum += acc / sd.len() as f64;
    }
    Ok(main + f64::from(model.cfg.lambda) * aux_sum)
}

/// Central finite differences through the whole model (forward + loss) for
/// a sample of parameters.
pub fn end_to_end_param_check(
    model: &Model,
    reg: &mut ParamRegistry,
    sample_img: &Tensor,
    sample_flow: &Tensor,
    gt: &BinaryMask,
    picks: &[(usize, usize)],
) -> Result<(), String> {
    let loss_of =
        |reg: &ParamRegistry| -> Result<f64, String> { precise_loss(model, reg, sample_img, sample_flow, gt) };

    // analytic gradients
    let mut tape = Tape::new();
    let (logits, pyr) = model
        .forward(&mut tape, reg, sample_img, sample_flow)
        .map_err(|e| e.to_string())?;
    let bundle =
        segmentation_loss(&mut tape, logits, &pyr, gt, model.cfg.lambda).map_err(|e| e.to_string())?;
    tape.backward(bundle.total).map_err(|e| e.to_string())?;
    reg.zero_grads();
    reg.accumulate_from(&tape);

    for &(slot, elem) in picks {
        let id = crate::nn::ParamId(slot);
        let name = reg.name(id).to_string();
        let analytic = reg.get(id).grad.as_ref().map(|g| g[elem]).unwrap_or(0.0);

        let orig = reg.get(id).data()[elem];
        reg.get_mut(id).data_mut()[elem] = orig + FD_STEP;
        let lp = loss_of(reg)?;
        reg.get_mut(id).data_mut()[elem] = orig - FD_STEP;
        let lm = loss_of(reg)?;
        reg.get_mut(id).data_mut()[elem] = orig;

        let fd = ((lp - lm) / (2.0 * f64::from(FD_STEP))) as f32;
        let err = (analytic - fd).abs();
        if err > GRAD_ABS_FLOOR && err / analytic.abs().max(fd.abs()) > GRAD_REL_TOL {
            return Err(format!(
                "param {name}[{elem}]: tape {analytic} vs fd {fd} (err {err})"
            ));
        }
    }
    Ok(())
}

fn check_end_to_end_gradients() -> Result<(), String> {
    let (model, mut reg) = Model::build_variant(Variant::Tiny, 50);
    let params = SynthParams {
        size: 32,
        frames: 2,
        distractors: 1,
        noise_std: 0.3,
    };
    let spec = random_scene(3, &params).map_err(|e| e.to_string())?;
    let sample = generate_sequence(&spec).map_err(|e| e.to_string())?.remove(0);

    let mut rng = init_rng(51);
    let picks: Vec<(usize, usize)> = (0..8)
        .map(|_| {
            let slot = rng.gen_range(0..reg.len());
            let n = reg.get(crate::nn::ParamId(slot)).numel();
            (slot, rng.gen_range(0..n))
        })
        .collect();
    end_to_end_param_check(&model, &mut reg, &sample.image, &sample.flow_rgb, &sample.gt, &picks)
}

// ---------------------------------------------------------------------------
// Format checks
// ---------------------------------------------------------------------------

fn temp_dir() -> Result<std::path::PathBuf, String> {
    let dir = std::env::temp_dir().join(format!("sfck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

fn check_tsr_roundtrip() -> Result<(), String> {
    let dir = temp_dir()?;
    let path = dir.join("check.tsr");
    let mut rng = init_rng(60);
    let t = rand_tensor(&mut rng, &[3, 4, 5], -100.0, 100.0);
    crate::io::write_tsr(&path, &t).map_err(|e| e.to_string())?;
    let back = crate::io::read_tsr(&path).map_err(|e| e.to_string())?;
    if back.shape() != t.shape() || back.data() != t.data() {
        return Err("tsr round trip not bitwise".into());
    }
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    bytes[1] = b'X';
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    match crate::io::read_tsr(&path) {
        Err(crate::error::StorageError::BadMagic { .. }) => Ok(()),
        other => Err(format!("corrupted magic not rejected: {other:?}")),
    }
}

fn check_checkpoint_roundtrip() -> Result<(), String> {
    let dir = temp_dir()?;
    let path = dir.join("check.ckpt");
    let cfg = ModelConfig::variant(Variant::Tiny);
    let (model, reg) = Model::build(cfg.clone(), 61).map_err(|e| e.to_string())?;
    crate::io::save_model_checkpoint(&path, &cfg, &reg, &[]).map_err(|e| e.to_string())?;
    let loaded = crate::io::load_model_checkpoint(&path).map_err(|e| e.to_string())?;
    let (_, mut reg2) = Model::build(loaded.cfg.clone(), 9999).map_err(|e| e.to_string())?;
    crate::io::apply_params(&path, &loaded.params, &mut reg2).map_err(|e| e.to_string())?;

    let mut rng = init_rng(62);
    let img = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let flow = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
    let mut t1 = Tape::new();
    let (l1, _) = model.forward(&mut t1, &reg, &img, &flow).map_err(|e| e.to_string())?;
    let (model2, _) = Model::build(loaded.cfg, 0).map_err(|e| e.to_string())?;
    let mut t2 = Tape::new();
    let (l2, _) = model2.forward(&mut t2, &reg2, &img, &flow).map_err(|e| e.to_string())?;
    if t1.value(l1).data() != t2.value(l2).data() {
        return Err("forward after checkpoint reload is not bitwise identical".into());
    }

    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    match crate::io::load_checkpoint(&path) {
        Err(crate::error::StorageError::CrcMismatch { .. }) => Ok(()),
        other => Err(format!("bit flip not caught by crc: {other:?}")),
    }
}

fn check_pnm_roundtrip() -> Result<(), String> {
    let dir = temp_dir()?;
    let mask_path = dir.join("check.pgm");
    let img_path = dir.join("check.ppm");
    let mut mask = BinaryMask::zeros(5, 7);
    mask.set(2, 3, 1);
    mask.set(4, 6, 1);
    crate::io::write_pgm_mask(&mask_path, &mask).map_err(|e| e.to_string())?;
    if crate::io::read_pgm_mask(&mask_path).map_err(|e| e.to_string())? != mask {
        return Err("pgm mask round trip failed".into());
    }
    let img = Tensor::from_fn(&[3, 4, 4], |i| ((i * 11) % 256) as f32 / 255.0);
    crate::io::write_ppm(&img_path, &img).map_err(|e| e.to_string())?;
    let back = crate::io::read_ppm(&img_path).map_err(|e| e.to_string())?;
    for (a, b) in img.data().iter().zip(back.data()) {
        if (a - b).abs() > 1e-6 {
            return Err("ppm round trip not exact on the 8-bit lattice".into());
        }
    }
    Ok(())
}
