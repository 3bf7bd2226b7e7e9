//! Lightweight all-MLP decoder, mask emission, and the training loss.

use crate::error::TensorError;
use crate::mask::BinaryMask;
use crate::model::Pyramid;
use crate::nn::{Linear, ParamRegistry};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ops, Tensor};
use rand_chacha::ChaCha8Rng;

/// Per-stage linear projections to a unified width, bilinear upsampling to
/// quarter resolution, channel concat, fuse, and a 2-class head.
pub struct Decoder {
    proj: Vec<Linear>,
    fuse: Linear,
    classify: Linear,
    pub channels: usize,
}

impl Decoder {
    pub fn new(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        stage_channels: [usize; 4],
        channels: usize,
    ) -> Self {
        let proj = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(reg, rng, &format!("decoder.proj{}", i + 1), c, channels))
            .collect();
        Self {
            proj,
            fuse: Linear::new(reg, rng, "decoder.fuse", 4 * channels, channels),
            classify: Linear::new(reg, rng, "decoder.classify", channels, 2),
            channels,
        }
    }

    /// Fuses the summed appearance+motion tokens of every stage into
    /// full-resolution logits `[2, H, W]` (channel 0 background, 1
    /// foreground).
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &ParamRegistry,
        pyramid: &Pyramid,
    ) -> Result<Var, TensorError> {
        if pyramid.stages.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "decode",
                msg: format!("pyramid has {} stages, expected 4", pyramid.stages.len()),
            });
        }
        let (h, w) = pyramid.input_hw;
        let (qh, qw) = (h / 4, w / 4);
        let c = self.channels;

        let mut upsampled = Vec::with_capacity(4);
        for (stage, proj) in pyramid.stages.iter().zip(&self.proj) {
            let sum = tape.add(stage.i_tokens, stage.o_tokens)?;
            let f = proj.forward(tape, reg, sum)?;
            let cn = tape.permute(f, &[1, 0])?;
            let grid = tape.reshape(cn, &[c, stage.h, stage.w])?;
            upsampled.push(tape.bilinear_resize(grid, qh, qw)?);
        }
        let cat = tape.concat(&upsampled, 0)?;
        let flat = tape.reshape(cat, &[4 * c, qh * qw])?;
        let tokens = tape.permute(flat, &[1, 0])?;
        let fused = self.fuse.forward(tape, reg, tokens)?;
        let logits = self.classify.forward(tape, reg, fused)?;
        let cn = tape.permute(logits, &[1, 0])?;
        let grid = tape.reshape(cn, &[2, qh, qw])?;
        tape.bilinear_resize(grid, h, w)
    }
}

/// Per-pixel argmax over the two logit channels. An exact tie resolves to
/// background.
pub fn binarize(logits: &Tensor) -> BinaryMask {
    let [two, h, w] = *logits.shape() else {
        panic!("binarize expects [2,H,W], got {:?}", logits.shape());
    };
    assert_eq!(two, 2, "binarize expects exactly 2 channels");
    let d = logits.data();
    let n = h * w;
    let data: Vec<u8> = (0..n).map(|p| u8::from(d[n + p] > d[p])).collect();
    BinaryMask::new(h, w, data)
}

/// The composed training objective.
pub struct LossBundle {
    pub total: Var,
    pub main: Var,
    pub aux: [Var; 4],
    pub lambda: f32,
}

/// Scalar snapshot of a [`LossBundle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f32,
    pub main: f32,
    pub aux: [f32; 4],
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let read = |v: Var| tape.value(v).data()[0];
        LossValues {
            total: read(self.total),
            main: read(self.main),
            aux: [
                read(self.aux[0]),
                read(self.aux[1]),
                read(self.aux[2]),
                read(self.aux[3]),
            ],
        }
    }
}

/// Cross-entropy on the upsampled logits plus `lambda`-weighted binary
/// cross-entropy of each coarse mask against the area-downsampled target.
pub fn segmentation_loss(
    tape: &mut Tape,
    logits: Var,
    pyramid: &Pyramid,
    gt: &BinaryMask,
    lambda: f32,
) -> Result<LossBundle, TensorError> {
    let (h, w) = pyramid.input_hw;
    let (gh, gw) = gt.dims();
    if (gh, gw) != (h, w) {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            left: vec![h, w],
            right: vec![gh, gw],
        });
    }
    let gt_t = gt.to_tensor();
    let main = tape.cross_entropy_2class(logits, &gt_t)?;

    let mut aux = Vec::with_capacity(4);
    for stage in &pyramid.stages {
        // Area-average pooling yields soft targets in [0,1]; BCE accepts them.
        let factor = h / stage.h;
        let target = if factor > 1 {
            ops::avg_pool2d(&gt_t, factor, factor)?
        } else {
            gt_t.clone()
        };
        aux.push(tape.bce_with_logits(stage.mask_logits, &target)?);
    }
    let aux: [Var; 4] = [aux[0], aux[1], aux[2], aux[3]];

    let s01 = tape.add(aux[0], aux[1])?;
    let s23 = tape.add(aux[2], aux[3])?;
    let aux_sum = tape.add(s01, s23)?;
    let weighted = tape.scale(aux_sum, lambda)?;
    let total = tape.add(main, weighted)?;
    Ok(LossBundle {
        total,
        main,
        aux,
        lambda,
    })
}
