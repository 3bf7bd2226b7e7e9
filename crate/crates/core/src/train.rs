//! Optimizer, schedule, and training loop.

use crate::data::Sample;
use crate::decoder::{binarize, segmentation_loss, LossValues};
use crate::error::{TensorError, TrainError};
use crate::mask::BinaryMask;
use crate::metrics;
use crate::model::Model;
use crate::nn::ParamRegistry;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
pub const WEIGHT_DECAY: f32 = 0.01;

/// AdamW with decoupled weight decay. Moment buffers mirror the registry.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(reg: &ParamRegistry) -> Self {
        let m = reg.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = reg.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter holding a gradient.
    pub fn step(&mut self, reg: &mut ParamRegistry, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let ids: Vec<_> = reg.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let slot = id.key();
            let param = reg.get_mut(id);
            let Some(grad) = param.grad.take() else {
                continue;
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + WEIGHT_DECAY * data[i]);
            }
        }
    }

    /// Serializes moments and step count as checkpoint extras.
    pub fn state_entries(&self, reg: &ParamRegistry) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push((
            "__opt_step__".to_string(),
            Tensor::scalar(self.t as f32),
        ));
        for (id, name, t) in reg.iter() {
            let slot = id.key();
            out.push((
                format!("__opt_m__/{name}"),
                Tensor::new(t.shape().to_vec(), self.m[slot].clone()).expect("same shape"),
            ));
            out.push((
                format!("__opt_v__/{name}"),
                Tensor::new(t.shape().to_vec(), self.v[slot].clone()).expect("same shape"),
            ));
        }
        out
    }

    /// Restores moments from checkpoint extras; returns false when absent.
    pub fn load_state(&mut self, reg: &ParamRegistry, extras: &HashMap<String, Tensor>) -> bool {
        let Some(step) = extras.get("__opt_step__") else {
            return false;
        };
        self.t = step.data()[0] as u64;
        for (id, name, _) in reg.iter() {
            let slot = id.key();
            if let Some(m) = extras.get(&format!("__opt_m__/{name}")) {
                self.m[slot].copy_from_slice(m.data());
            }
            if let Some(v) = extras.get(&format!("__opt_v__/{name}")) {
                self.v[slot].copy_from_slice(v.data());
            }
        }
        true
    }
}

/// Polynomial decay: `base * (1 - t/total)^power`, clamped at zero.
pub fn poly_lr(base: f32, step: u64, total: u64, power: f32) -> f32 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * (1.0 - step as f32 / total as f32).powf(power)
}

/// Forward + loss over a batch, one backward pass, one optimizer step.
/// Returns the batch-mean loss terms.
pub fn train_step(
    model: &Model,
    reg: &mut ParamRegistry,
    opt: &mut AdamW,
    batch: &[&Sample],
    lr: f32,
) -> Result<LossValues, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let mut totals = Vec::with_capacity(batch.len());
    let mut sum = LossValues {
        total: 0.0,
        main: 0.0,
        aux: [0.0; 4],
    };
    for sample in batch {
        let (logits, pyramid) = model.forward(&mut tape, reg, &sample.image, &sample.flow_rgb)?;
        let bundle = segmentation_loss(&mut tape, logits, &pyramid, &sample.gt, model.cfg.lambda)?;
        let v = bundle.values(&tape);
        sum.total += v.total;
        sum.main += v.main;
        for (a, b) in sum.aux.iter_mut().zip(v.aux) {
            *a += b;
        }
        totals.push(bundle.total);
    }
    let n = batch.len() as f32;
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = tape.add(acc, t).map_err(TensorError::from)?;
    }
    let batch_loss = tape.scale(acc, 1.0 / n)?;

    let values = LossValues {
        total: sum.total / n,
        main: sum.main / n,
        aux: sum.aux.map(|a| a / n),
    };
    if !values.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: opt.step_count(),
            main: values.main,
            aux: values.aux,
        });
    }

    tape.backward(batch_loss)?;
    reg.zero_grads();
    reg.accumulate_from(&tape);
    opt.step(reg, lr);
    Ok(values)
}

/// Forward pass to a binary mask, no gradients retained afterwards.
pub fn predict_mask(model: &Model, reg: &ParamRegistry, sample: &Sample) -> Result<BinaryMask, TensorError> {
    let mut tape = Tape::new();
    let (logits, _) = model.forward(&mut tape, reg, &sample.image, &sample.flow_rgb)?;
    Ok(binarize(tape.value(logits)))
}

/// Mean J and boundary F over samples.
pub fn evaluate(model: &Model, reg: &ParamRegistry, samples: &[Sample]) -> Result<(f32, f32), TensorError> {
    let mut j_sum = 0.0f32;
    let mut f_sum = 0.0f32;
    for s in samples {
        let pred = predict_mask(model, reg, s)?;
        let (h, w) = s.gt.dims();
        let tol = metrics::default_boundary_tol(h, w);
        j_sum += metrics::region_similarity(&pred, &s.gt).expect("same dims");
        f_sum += metrics::boundary_f(&pred, &s.gt, tol).expect("same dims");
    }
    let n = samples.len().max(1) as f32;
    Ok((j_sum / n, f_sum / n))
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub lr: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule_power: f32,
    pub seed: u64,
    pub val_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 2000,
            batch_size: 4,
            schedule_power: 0.9,
            seed: 0,
            val_every: 200,
        }
    }
}

/// Events surfaced to the caller during training.
pub enum TrainEvent {
    Step {
        step: u64,
        lr: f32,
        loss: LossValues,
    },
    Validation {
        step: u64,
        j: f32,
        f: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub best_val_j: f32,
    pub final_val: (f32, f32),
}

/// Deterministic batch index stream: step `t` always draws the same indices
/// for a given seed, so an interrupted run resumed at `t` sees the same data.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (step.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x243F_6A88)),
    );
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Runs the poly-scheduled training loop from `start_step` to
/// `settings.steps`, validating every `val_every` steps and at the end.
/// The callback observes every step and validation with registry access
/// (for checkpointing).
pub fn train(
    model: &Model,
    reg: &mut ParamRegistry,
    opt: &mut AdamW,
    train_samples: &[Sample],
    val_samples: &[Sample],
    settings: &TrainSettings,
    start_step: u64,
    mut on_event: impl FnMut(&TrainEvent, &ParamRegistry, &AdamW),
) -> Result<TrainOutcome, TrainError> {
    if train_samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut best_j = f32::NEG_INFINITY;
    let mut last_val = (0.0, 0.0);
    for step in start_step..settings.steps {
        let lr = poly_lr(settings.lr, step, settings.steps, settings.schedule_power);
        let idx = batch_indices(settings.seed, step, train_samples.len(), settings.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train_samples[i]).collect();
        let loss = train_step(model, reg, opt, &batch, lr)?;
        on_event(&TrainEvent::Step { step, lr, loss }, reg, opt);

        let due = settings.val_every > 0 && (step + 1) % settings.val_every == 0;
        if (due || step + 1 == settings.steps) && !val_samples.is_empty() {
            let (j, f) = evaluate(model, reg, val_samples)?;
            last_val = (j, f);
            best_j = best_j.max(j);
            on_event(&TrainEvent::Validation { step: step + 1, j, f }, reg, opt);
        }
    }
    Ok(TrainOutcome {
        steps_run: settings.steps.saturating_sub(start_step),
        best_val_j: best_j,
        final_val: last_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{generate_sequence, random_scene, SynthParams};

    fn tiny_setup(seed: u64) -> (Model, ParamRegistry, AdamW) {
        let (model, reg) = Model::build_variant(Variant::Tiny, seed);
        let opt = AdamW::new(&reg);
        (model, reg, opt)
    }

    fn one_sample(canvas: usize) -> Sample {
        let params = SynthParams {
            size: canvas,
            frames: 2,
            distractors: 1,
            noise_std: 0.2,
        };
        let spec = random_scene(5, &params).unwrap();
        generate_sequence(&spec).unwrap().remove(0)
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 100, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 100, 100, 0.9), 0.0);
        let mid = poly_lr(0.1, 50, 100, 0.9);
        assert!((mid - 0.1 * 0.5f32.powf(0.9)).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (model, mut reg, mut opt) = tiny_setup(0);
        let sample = one_sample(64);
        let before: Vec<Vec<f32>> = reg.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        train_step(&model, &mut reg, &mut opt, &[&sample], 0.0).unwrap();
        let after: Vec<Vec<f32>> = reg.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        // moments did move
        assert_eq!(opt.step_count(), 1);
        assert!(opt.m.iter().any(|m| m.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn loss_decreases_on_repeated_steps() {
        let (model, mut reg, mut opt) = tiny_setup(1);
        let sample = one_sample(32);
        let first = train_step(&model, &mut reg, &mut opt, &[&sample], 3e-4).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&model, &mut reg, &mut opt, &[&sample], 3e-4).unwrap();
        }
        assert!(
            last.total < first.total,
            "loss should drop: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn batch_indices_deterministic_per_step() {
        let a = batch_indices(7, 3, 100, 4);
        let b = batch_indices(7, 3, 100, 4);
        assert_eq!(a, b);
        assert_ne!(batch_indices(7, 4, 100, 4), a);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let (model, mut reg, mut opt) = tiny_setup(2);
        let sample = one_sample(32);
        train_step(&model, &mut reg, &mut opt, &[&sample], 1e-3).unwrap();
        let entries = opt.state_entries(&reg);
        let extras: HashMap<String, Tensor> = entries.into_iter().collect();
        let mut opt2 = AdamW::new(&reg);
        assert!(opt2.load_state(&reg, &extras));
        assert_eq!(opt2.t, opt.t);
        assert_eq!(opt2.m, opt.m);
        assert_eq!(opt2.v, opt.v);
    }
}
