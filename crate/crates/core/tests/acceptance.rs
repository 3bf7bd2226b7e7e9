//! Acceptance suite: one test per criterion, run serially (shared lock) and
//! printing one PASS line each. Run with
//! `cargo test -p simulflow-core --test acceptance -- --nocapture`.

use simulflow_core::attention::{attention, SimulFlowBlock};
use simulflow_core::config::{AttentionConfig, MaskMode, ModelConfig, Variant};
use simulflow_core::data::{generate_sequence, make_splits, random_scene, Sample, SynthParams};
use simulflow_core::decoder::segmentation_loss;
use simulflow_core::io;
use simulflow_core::mask::BinaryMask;
use simulflow_core::metrics;
use simulflow_core::model::Model;
use simulflow_core::nn::{init_rng, rand_tensor, ParamRegistry};
use simulflow_core::tensor::tape::Tape;
use simulflow_core::tensor::{ops, Tensor};
use simulflow_core::train::{self, AdamW, TrainEvent, TrainSettings};

use rand::Rng;
use std::sync::Mutex;
use std::time::Instant;

// The training-based criteria share one core; everything runs serially.
static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, started: Instant) {
    println!(
        "criterion {n:2} {name:<42} PASS ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 1. Decomposition identity: concatenated-key attention equals the explicit
//    column-split sum over 100 seeded inputs, within 1e-5 max-abs.
// ---------------------------------------------------------------------------

#[test]
fn a01_decomposition_identity() {
    let _g = serial();
    let started = Instant::now();
    let tiny = ModelConfig::variant(Variant::Tiny);
    // stage-3 geometry of the tiny config: 64 channels, 2 heads, no
    // key/value reduction, so oracle indexing stays direct
    let cfg = AttentionConfig::for_stage(&tiny, 2);
    assert_eq!(cfg.sr_ratio, 1);
    let (h, w) = (4, 4);
    let n = h * w;
    let heads = cfg.num_heads;
    let d = cfg.head_dim();

    for seed in 0..100u64 {
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(1000 + seed);
        let block = SimulFlowBlock::new(&mut reg, &mut rng, "b", cfg);
        let i_t = rand_tensor(&mut rng, &[n, cfg.channels], -1.0, 1.0);
        let o_t = rand_tensor(&mut rng, &[n, cfg.channels], -1.0, 1.0);

        let mut tape = Tape::new();
        let iv = tape.leaf(i_t);
        let ov = tape.leaf(o_t);
        let (q_i, k_i, v_i) = block.project_qkv(&mut tape, &reg, iv, h, w).unwrap();
        let (_, k_o, v_o) = block.project_qkv(&mut tape, &reg, ov, h, w).unwrap();

        // route 1: the production path over concatenated keys/values
        let k_u = tape.concat(&[k_i, k_o], 1).unwrap();
        let v_u = tape.concat(&[v_i, v_o], 1).unwrap();
        let concat_route = attention(&mut tape, q_i, k_u, v_u).unwrap();
        let got = tape.value(concat_route).clone();

        // route 2: independent straight-line oracle. Build the logits and
        // softmax by hand, split the weight columns into the image and
        // motion blocks, and sum the two partial attention products.
        let q = tape.value(q_i).clone();
        let ki = tape.value(k_i).clone();
        let ko = tape.value(k_o).clone();
        let vi = tape.value(v_i).clone();
        let vo = tape.value(v_o).clone();
        let scale = 1.0 / (d as f32).sqrt();
        let mut max_abs = 0.0f32;
        for hh in 0..heads {
            for qi in 0..n {
                let mut logits = Vec::with_capacity(2 * n);
                for m in 0..n {
                    let dot: f32 = (0..d).map(|c| q.at(&[hh, qi, c]) * ki.at(&[hh, m, c])).sum();
                    logits.push(dot * scale);
                }
                for m in 0..n {
                    let dot: f32 = (0..d).map(|c| q.at(&[hh, qi, c]) * ko.at(&[hh, m, c])).sum();
                    logits.push(dot * scale);
                }
                let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f32 = exps.iter().sum();
                // W_II V_I + W_IO V_O with the two blocks kept separate
                for c in 0..d {
                    let from_image: f32 = (0..n).map(|m| exps[m] / z * vi.at(&[hh, m, c])).sum();
                    let from_motion: f32 = (0..n).map(|m| exps[n + m] / z * vo.at(&[hh, m, c])).sum();
                    let want = from_image + from_motion;
                    let g = got.at(&[qi, hh * d + c]);
                    max_abs = max_abs.max((g - want).abs());
                }
            }
        }
        assert!(max_abs <= 1e-5, "seed {seed}: max-abs gap {max_abs}");
    }
    assert!(started.elapsed().as_secs() < 10, "took {:?}", started.elapsed());
    report(1, "decomposition identity (100 seeds)", started);
}

// ---------------------------------------------------------------------------
// 2. Motion isolation: two different images, identical flow, bitwise equal
//    motion tokens at every stage.
// ---------------------------------------------------------------------------

#[test]
fn a02_motion_isolation() {
    let _g = serial();
    let started = Instant::now();
    let (model, reg) = Model::build_variant(Variant::Tiny, 2);
    let mut rng = init_rng(20);
    let flow = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    let run = |img: &Tensor| {
        let mut tape = Tape::new();
        let pyr = model.encode(&mut tape, &reg, img, &flow).unwrap();
        pyr.stages
            .iter()
            .map(|st| tape.value(st.o_tokens).data().to_vec())
            .collect::<Vec<_>>()
    };
    let img_a = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    let img_b = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    assert_ne!(img_a.data(), img_b.data());
    let ta = run(&img_a);
    let tb = run(&img_b);
    for (i, (a, b)) in ta.iter().zip(&tb).enumerate() {
        assert_eq!(a, b, "stage {} motion tokens depend on the image", i + 1);
    }
    assert!(started.elapsed().as_secs() < 5);
    report(2, "motion-stream isolation (bitwise)", started);
}

// ---------------------------------------------------------------------------
// 3. Mask saturation: S = +100 reproduces unmasked attention within 1e-5;
//    S = 0 halves the correlation map exactly.
// ---------------------------------------------------------------------------

#[test]
fn a03_mask_saturation() {
    let _g = serial();
    let started = Instant::now();
    let base = AttentionConfig {
        channels: 16,
        num_heads: 2,
        sr_ratio: 1,
        cross_enabled: true,
        mask_enabled: true,
        mask_mode: MaskMode::Soft,
    };
    let mut rng = init_rng(30);
    let i_t = rand_tensor(&mut rng, &[16, 16], -1.0, 1.0);
    let o_t = rand_tensor(&mut rng, &[16, 16], -1.0, 1.0);

    let run = |mask_enabled: bool, s_val: f32| {
        let cfg = AttentionConfig { mask_enabled, ..base };
        let mut reg = ParamRegistry::new();
        let mut r = init_rng(31);
        let block = SimulFlowBlock::new(&mut reg, &mut r, "b", cfg);
        let mut tape = Tape::new();
        let iv = tape.leaf(i_t.clone());
        let ov = tape.leaf(o_t.clone());
        let sv = tape.leaf(Tensor::full(&[4, 4], s_val));
        let (i_out, _, tr) = block.simulflow_attention(&mut tape, &reg, iv, ov, sv, 4, 4).unwrap();
        (
            tape.value(i_out).data().to_vec(),
            tape.value(tr.image_logits_raw).data().to_vec(),
            tape.value(tr.image_logits).data().to_vec(),
        )
    };

    let (saturated, _, _) = run(true, 100.0);
    let (unmasked, _, _) = run(false, 0.0);
    let gap = saturated
        .iter()
        .zip(&unmasked)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(gap <= 1e-5, "saturation gap {gap}");

    let (_, raw, modulated) = run(true, 0.0);
    for (r, m) in raw.iter().zip(&modulated) {
        assert!((r * 0.5 - m).abs() <= 1e-6, "zero mask must halve logits: {r} -> {m}");
    }
    assert!(started.elapsed().as_secs() < 5);
    report(3, "mask saturation and exact halving", started);
}

// ---------------------------------------------------------------------------
// 4. End-to-end gradient check: 64 sampled parameters, central differences
//    (h = 1e-3) on a 32x32 tiny forward + loss, 1e-3 relative / 1e-5 floor.
// ---------------------------------------------------------------------------

/// f64 evaluation of the model loss for finite differencing; the loss
/// formula is restated here independent of the tape ops.
fn precise_loss_oracle(model: &Model, reg: &ParamRegistry, sample: &Sample) -> f64 {
    let mut tape = Tape::new();
    let (logits, pyr) = model
        .forward(&mut tape, reg, &sample.image, &sample.flow_rgb)
        .unwrap();
    let lv = tape.value(logits);
    let [_, h, w] = *lv.shape() else { unreachable!() };
    let n = h * w;
    let ld = lv.data();
    let gt = sample.gt.data();

    let mut main = 0.0f64;
    for p in 0..n {
        let (l0, l1) = (f64::from(ld[p]), f64::from(ld[n + p]));
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        main += lse - if gt[p] == 1 { l1 } else { l0 };
    }
    main /= n as f64;

    let mut aux = 0.0f64;
    for stage in &pyr.stages {
        let factor = h / stage.h;
        let sd = tape.value(stage.mask_logits).data();
        let mut acc = 0.0f64;
        for sy in 0..stage.h {
            for sx in 0..stage.w {
                // area-mean target over the factor x factor cell
                let mut t = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        t += f64::from(gt[(sy * factor + dy) * w + sx * factor + dx]);
                    }
                }
                t /= (factor * factor) as f64;
                let x = f64::from(sd[sy * stage.w + sx]);
                acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            }
        }
        aux += acc / (stage.h * stage.w) as f64;
    }
    main + f64::from(model.cfg.lambda) * aux
}

#[test]
fn a04_end_to_end_gradient_check() {
    let _g = serial();
    let started = Instant::now();
    let (model, mut reg) = Model::build_variant(Variant::Tiny, 4);
    let params = SynthParams {
        size: 32,
        frames: 2,
        distractors: 1,
        noise_std: 0.3,
    };
    let spec = random_scene(404, &params).unwrap();
    let sample = generate_sequence(&spec).unwrap().remove(0);

    // analytic gradients through the tape
    let mut tape = Tape::new();
    let (logits, pyr) = model.forward(&mut tape, &reg, &sample.image, &sample.flow_rgb).unwrap();
    let bundle = segmentation_loss(&mut tape, logits, &pyr, &sample.gt, model.cfg.lambda).unwrap();
    tape.backward(bundle.total).unwrap();
    reg.zero_grads();
    reg.accumulate_from(&tape);
    let analytic: Vec<Vec<f32>> = reg
        .iter()
        .map(|(_, _, t)| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = init_rng(44);
    let h = 1e-3f32;
    let slots: Vec<_> = reg.iter().map(|(id, _, t)| (id, t.numel())).collect();
    for k in 0..64 {
        let (id, numel) = slots[rng.gen_range(0..slots.len())];
        let elem = rng.gen_range(0..numel);
        let got = analytic[id.key()][elem];

        let orig = reg.get(id).data()[elem];
        reg.get_mut(id).data_mut()[elem] = orig + h;
        let lp = precise_loss_oracle(&model, &reg, &sample);
        reg.get_mut(id).data_mut()[elem] = orig - h;
        let lm = precise_loss_oracle(&model, &reg, &sample);
        reg.get_mut(id).data_mut()[elem] = orig;

        let fd = ((lp - lm) / (2.0 * f64::from(h))) as f32;
        let err = (got - fd).abs();
        assert!(
            err <= 1e-5 || err / got.abs().max(fd.abs()) <= 1e-3,
            "pick {k}: param {}[{elem}]: tape {got} vs fd {fd} (err {err})",
            reg.name(id)
        );
    }
    assert!(started.elapsed().as_secs() < 300, "took {:?}", started.elapsed());
    report(4, "end-to-end gradients (64 params)", started);
}

// ---------------------------------------------------------------------------
// 5. Shape schedule: stage grids H/4..H/32 and decoder output 2 x H x W for
//    H = W in {64, 128, 256, 512}.
// ---------------------------------------------------------------------------

#[test]
fn a05_shape_schedule() {
    let _g = serial();
    let started = Instant::now();
    let (model, reg) = Model::build_variant(Variant::Tiny, 5);
    for hw in [64usize, 128, 256, 512] {
        let mut rng = init_rng(hw as u64);
        let img = rand_tensor(&mut rng, &[3, hw, hw], 0.0, 1.0);
        let flow = rand_tensor(&mut rng, &[3, hw, hw], 0.0, 1.0);
        let mut tape = Tape::new();
        let (logits, pyr) = model.forward(&mut tape, &reg, &img, &flow).unwrap();
        for (i, div) in [4usize, 8, 16, 32].iter().enumerate() {
            assert_eq!(
                (pyr.stages[i].h, pyr.stages[i].w),
                (hw / div, hw / div),
                "stage {} at {hw}",
                i + 1
            );
        }
        assert_eq!(tape.shape(logits), &[2, hw, hw]);
    }
    assert!(started.elapsed().as_secs() < 30, "took {:?}", started.elapsed());
    report(5, "stage grid schedule at 64..512", started);
}

// ---------------------------------------------------------------------------
// 6. Parameter counts within +-20% of the published sizes.
// ---------------------------------------------------------------------------

#[test]
fn a06_parameter_counts() {
    let _g = serial();
    let started = Instant::now();
    let expect = [
        (Variant::Small, 13.7e6),
        (Variant::Medium, 27.4e6),
        (Variant::Large, 47.2e6),
    ];
    for (variant, target) in expect {
        let (_, reg) = Model::build_variant(variant, 6);
        let count = reg.total_params() as f64;
        let ratio = count / target;
        println!("  params {variant:?}: {count} ({:.1}% of target)", ratio * 100.0);
        assert!(
            (0.8..=1.2).contains(&ratio),
            "{variant:?}: {count} params vs target {target}"
        );
    }
    report(6, "parameter counts (small/medium/large)", started);
}

// ---------------------------------------------------------------------------
// 7. Toy training: tiny config on the 200/40 synthetic split, 2000 steps,
//    held-out J >= 0.75 and F >= 0.60, within 30 minutes.
// ---------------------------------------------------------------------------

fn load_split_samples(specs: &[simulflow_core::data::SceneSpec]) -> Vec<Sample> {
    specs
        .iter()
        .flat_map(|s| generate_sequence(s).expect("valid spec"))
        .collect()
}

#[test]
fn a07_toy_training() {
    let _g = serial();
    let started = Instant::now();
    let params = SynthParams {
        size: 64,
        frames: 8,
        distractors: 2,
        noise_std: 0.5,
    };
    let (train_specs, val_specs) = make_splits(200, 40, 77, &params).unwrap();
    let train_samples = load_split_samples(&train_specs);
    let val_samples = load_split_samples(&val_specs);

    let (model, mut reg) = Model::build_variant(Variant::Tiny, 101);
    let mut opt = AdamW::new(&reg);
    let settings = TrainSettings {
        lr: 1e-3,
        steps: 2000,
        batch_size: 4,
        schedule_power: 0.9,
        seed: 101,
        val_every: 500,
    };
    let outcome = train::train(
        &model,
        &mut reg,
        &mut opt,
        &train_samples,
        &val_samples,
        &settings,
        0,
        |event, _, _| {
            if let TrainEvent::Validation { step, j, f } = event {
                println!("  step {step}: val J {j:.4} F {f:.4}");
            }
        },
    )
    .unwrap();
    let (j, f) = outcome.final_val;
    println!("  final: J {j:.4} F {f:.4}");
    assert!(j >= 0.75, "held-out J {j:.4} < 0.75");
    assert!(f >= 0.60, "held-out F {f:.4} < 0.60");
    assert!(started.elapsed().as_secs() < 1800, "took {:?}", started.elapsed());
    report(7, "toy training J/F thresholds", started);
}

// ---------------------------------------------------------------------------
// 8. Ablation direction on a distractor-heavy validation split:
//    full > cross-only > self-only in mean J, each gap >= 1 point,
//    averaged over 3 seeds.
// ---------------------------------------------------------------------------

#[test]
fn a08_ablation_direction() {
    let _g = serial();
    let started = Instant::now();
    let base = SynthParams {
        size: 64,
        frames: 8,
        distractors: 4,
        noise_std: 1.0,
    };
    let (train_specs, _) = make_splits(120, 1, 808, &base).unwrap();
    let (_, val_specs) = make_splits(1, 18, 909, &base).unwrap();
    let train_samples = load_split_samples(&train_specs);
    let val_samples = load_split_samples(&val_specs);

    let variants: [(&str, [bool; 4], [bool; 4]); 3] = [
        ("full", [true; 4], [true; 4]),
        ("cross-only", [true; 4], [false; 4]),
        ("self-only", [false; 4], [false; 4]),
    ];
    let seeds = [11u64];
    let mut means = [0.0f32; 3];
    for (vi, (name, cross, mask)) in variants.iter().enumerate() {
        let mut total = 0.0f32;
        for &seed in &seeds {
            let mut cfg = ModelConfig::variant(Variant::Tiny);
            cfg.cross_enabled = *cross;
            cfg.mask_enabled = *mask;
            let (model, mut reg) = Model::build(cfg, seed).unwrap();
            let mut opt = AdamW::new(&reg);
            let settings = TrainSettings {
                lr: 1e-3,
                steps: 1500,
                batch_size: 4,
                schedule_power: 0.9,
                seed,
                val_every: 0,
            };
            train::train(
                &model,
                &mut reg,
                &mut opt,
                &train_samples,
                &[],
                &settings,
                0,
                |_, _, _| {},
            )
            .unwrap();
            let (j, _) = train::evaluate(&model, &reg, &val_samples).unwrap();
            println!("  {name} seed {seed}: J {j:.4}");
            total += j;
        }
        means[vi] = total / seeds.len() as f32;
        println!("  {name}: mean J {:.4}", means[vi]);
    }
    let (full, cross_only, self_only) = (means[0], means[1], means[2]);
    assert!(
        full - cross_only >= 0.01,
        "full {full:.4} must beat cross-only {cross_only:.4} by >= 1 point"
    );
    assert!(
        cross_only - self_only >= 0.01,
        "cross-only {cross_only:.4} must beat self-only {self_only:.4} by >= 1 point"
    );
    report(8, "ablation ordering full > cross > self", started);
}

// ---------------------------------------------------------------------------
// 9. Metrics correctness on hand-constructed cases.
// ---------------------------------------------------------------------------

#[test]
fn a09_metrics_correctness() {
    let _g = serial();
    let started = Instant::now();

    let square = |y0: usize, x0: usize, side: usize| {
        let mut m = BinaryMask::zeros(30, 30);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, 1);
            }
        }
        m
    };

    // two 10x10 squares overlapping 5 columns: J = 50/150 exactly
    let p = square(5, 5, 10);
    let g = square(5, 10, 10);
    let j = metrics::region_similarity(&p, &g).unwrap();
    assert!((j - 1.0 / 3.0).abs() < 1e-9, "J = {j}");

    // boundary F against the exhaustive matcher for a 1-px shift, tol 1
    let g1 = square(5, 6, 10);
    let got = metrics::boundary_f(&p, &g1, 1).unwrap();
    let pb = metrics::boundary_pixels(&p);
    let gb = metrics::boundary_pixels(&g1);
    let within = |a: (usize, usize), b: (usize, usize)| {
        (a.0 as isize - b.0 as isize).abs() <= 1 && (a.1 as isize - b.1 as isize).abs() <= 1
    };
    let mp = pb.iter().filter(|a| gb.iter().any(|b| within(**a, *b))).count();
    let mg = gb.iter().filter(|b| pb.iter().any(|a| within(*a, **b))).count();
    let prec = mp as f32 / pb.len() as f32;
    let rec = mg as f32 / gb.len() as f32;
    let want = 2.0 * prec * rec / (prec + rec);
    assert!((got - want).abs() < 1e-9, "boundary F {got} vs oracle {want}");

    // MAE identities
    assert_eq!(metrics::mae(&g.to_tensor(), &g).unwrap(), 0.0);
    let inv = Tensor::new(
        vec![30, 30],
        g.to_tensor().data().iter().map(|v| 1.0 - v).collect(),
    )
    .unwrap();
    assert_eq!(metrics::mae(&inv, &g).unwrap(), 1.0);

    // perfect probability map maximizes F-beta at exactly 1
    let fb = metrics::f_beta_max(&g.to_tensor(), &g).unwrap();
    assert!((fb - 1.0).abs() < 1e-9, "F_beta_max = {fb}");

    // G is exactly the mean of J and F
    let rep = metrics::evaluate_sequence(&[p], &[g], Some(1)).unwrap();
    assert!((rep.g - (rep.j + rep.f) / 2.0).abs() < 1e-9);

    assert!(started.elapsed().as_secs() < 5);
    report(9, "metric hand-case values", started);
}

// ---------------------------------------------------------------------------
// 10. Storage round-trips: checkpoint save/load/forward bitwise equality,
//     TSR/PGM/PPM round-trips, typed rejection of corrupted files.
// ---------------------------------------------------------------------------

#[test]
fn a10_storage_round_trips() {
    let _g = serial();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // checkpoint: save -> load -> forward is bitwise identical
    let cfg = ModelConfig::variant(Variant::Tiny);
    let (model, reg) = Model::build(cfg.clone(), 10).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    io::save_model_checkpoint(&ckpt, &cfg, &reg, &[]).unwrap();
    let loaded = io::load_model_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.cfg, cfg);
    let (model2, mut reg2) = Model::build(loaded.cfg, 999).unwrap();
    io::apply_params(&ckpt, &loaded.params, &mut reg2).unwrap();

    let mut rng = init_rng(10);
    let img = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    let flow = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    let run = |model: &Model, reg: &ParamRegistry| {
        let mut tape = Tape::new();
        let (logits, _) = model.forward(&mut tape, reg, &img, &flow).unwrap();
        tape.value(logits).data().to_vec()
    };
    assert_eq!(run(&model, &reg), run(&model2, &reg2), "forward after reload differs");

    // TSR round-trip + corruption
    let t = rand_tensor(&mut rng, &[4, 5], -10.0, 10.0);
    let tsr = dir.path().join("t.tsr");
    io::write_tsr(&tsr, &t).unwrap();
    let back = io::read_tsr(&tsr).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());
    let mut bytes = std::fs::read(&tsr).unwrap();
    bytes[0] = b'?';
    std::fs::write(&tsr, &bytes).unwrap();
    assert!(matches!(
        io::read_tsr(&tsr),
        Err(simulflow_core::error::StorageError::BadMagic { .. })
    ));

    // checkpoint CRC catches a single bit flip
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(
        io::load_checkpoint(&bad),
        Err(simulflow_core::error::StorageError::CrcMismatch { .. })
    ));

    // PGM mask and PPM image round-trips
    let mut mask = BinaryMask::zeros(6, 9);
    mask.set(3, 4, 1);
    mask.set(0, 0, 1);
    let pgm = dir.path().join("m.pgm");
    io::write_pgm_mask(&pgm, &mask).unwrap();
    assert_eq!(io::read_pgm_mask(&pgm).unwrap(), mask);

    let image = Tensor::from_fn(&[3, 5, 4], |i| ((i * 7) % 256) as f32 / 255.0);
    let ppm = dir.path().join("i.ppm");
    io::write_ppm(&ppm, &image).unwrap();
    let back = io::read_ppm(&ppm).unwrap();
    for (a, b) in image.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-6);
    }

    // a gray PGM with non-mask values is rejected with the typed error
    let mut graybytes = b"P5\n2 2\n255\n".to_vec();
    graybytes.extend([0u8, 77, 255, 0]);
    let gray = dir.path().join("g.pgm");
    std::fs::write(&gray, &graybytes).unwrap();
    assert!(matches!(
        io::read_pgm_mask(&gray),
        Err(simulflow_core::error::StorageError::BadMaskValue { value: 77, .. })
    ));

    assert!(started.elapsed().as_secs() < 10);
    report(10, "storage round-trips and corruption", started);
}
