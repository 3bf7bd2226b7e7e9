//! The four-stage two-stream encoder and the assembled model.

use crate::attention::{AttnInternals, CoarseMaskHead, SimulFlowBlock};
use crate::config::{AttentionConfig, ModelConfig, Variant};
use crate::decoder::Decoder;
use crate::error::TensorError;
use crate::nn::{init_rng, Conv2d, LayerNorm, ParamRegistry};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Strided-conv patch embedding followed by layer norm, emitting tokens.
pub struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        patch: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(reg, rng, &format!("{name}.conv"), c_in, c_out, patch, patch, 0),
            norm: LayerNorm::new(reg, &format!("{name}.norm"), c_out),
        }
    }

    /// `[C_in, H, W] -> ([H'/W' tokens, C_out], H', W')`
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &ParamRegistry,
        x: Var,
    ) -> Result<(Var, usize, usize), TensorError> {
        let [_, h, w] = *tape.shape(x) else {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                msg: format!("expected CHW input, got {:?}", tape.shape(x)),
            });
        };
        if h % self.conv.stride != 0 || w % self.conv.stride != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                msg: format!("extent {h}x{w} not divisible by stride {}", self.conv.stride),
            });
        }
        let grid = self.conv.forward(tape, reg, x)?;
        let (oh, ow) = self.conv.out_hw(h, w);
        let flat = tape.reshape(grid, &[self.conv.c_out, oh * ow])?;
        let tokens = tape.permute(flat, &[1, 0])?;
        let tokens = self.norm.forward(tape, reg, tokens)?;
        Ok((tokens, oh, ow))
    }
}

struct Stage {
    patch: PatchEmbed,
    mask_head: CoarseMaskHead,
    blocks: Vec<SimulFlowBlock>,
}

/// Per-stage encoder output: paired token grids plus the coarse mask.
pub struct StageOut {
    pub i_tokens: Var,
    pub o_tokens: Var,
    pub h: usize,
    pub w: usize,
    /// Raw coarse-mask logits, `[h, w]`.
    pub mask_logits: Var,
    /// Attention internals of the stage's last block.
    pub attn: Option<AttnInternals>,
}

/// The multi-level feature representation: four stages plus coarse masks.
pub struct Pyramid {
    pub stages: Vec<StageOut>,
    pub input_hw: (usize, usize),
}

/// The full network: shared-weight two-stream encoder plus light decoder.
pub struct Model {
    pub cfg: ModelConfig,
    stages: Vec<Stage>,
    pub decoder: Decoder,
}

impl Model {
    /// Builds and initializes a model for the given config. Initialization
    /// is deterministic in `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamRegistry), TensorError> {
        cfg.validate().map_err(|msg| TensorError::InvalidArgument {
            op: "model_build",
            msg,
        })?;
        let mut reg = ParamRegistry::new();
        let mut rng = init_rng(seed);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let c_in = if i == 0 { 3 } else { cfg.channels[i - 1] };
            let patch = if i == 0 { 4 } else { 2 };
            let name = format!("stage{}", i + 1);
            let embed = PatchEmbed::new(&mut reg, &mut rng, &format!("{name}.patch"), c_in, cfg.channels[i], patch);
            let mask_head = CoarseMaskHead::new(&mut reg, &mut rng, &format!("{name}.mask_head"), cfg.channels[i]);
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    SimulFlowBlock::new(
                        &mut reg,
                        &mut rng,
                        &format!("{name}.block{j}"),
                        AttentionConfig::for_stage(&cfg, i),
                    )
                })
                .collect();
            stages.push(Stage {
                patch: embed,
                mask_head,
                blocks,
            });
        }
        let decoder = Decoder::new(&mut reg, &mut rng, cfg.channels, cfg.decoder_channels);
        Ok((
            Self {
                cfg,
                stages,
                decoder,
            },
            reg,
        ))
    }

    pub fn build_variant(v: Variant, seed: u64) -> (Self, ParamRegistry) {
        Self::build(ModelConfig::variant(v), seed).expect("built-in variants are valid")
    }

    /// Scales [0,1] inputs to zero mean, unit-ish range: `(x - 0.5) / 0.5`.
    pub fn normalize_input(x: &Tensor) -> Tensor {
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| 2.0 * v - 1.0).collect(),
        )
        .expect("same shape")
    }

    fn check_input(&self, image: &Tensor, flow_rgb: &Tensor) -> Result<(usize, usize), TensorError> {
        let [c, h, w] = *image.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "encoder",
                msg: format!("expected [3,H,W] image, got {:?}", image.shape()),
            });
        };
        if c != 3 || image.shape() != flow_rgb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "encoder",
                left: image.shape().to_vec(),
                right: flow_rgb.shape().to_vec(),
            });
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "encoder",
                msg: format!("input {h}x{w} must be divisible by 32"),
            });
        }
        Ok((h, w))
    }

    /// Runs the two-stream encoder. Both streams share every parameter; the
    /// coarse mask of each stage is predicted once from the stage's embedded
    /// appearance tokens and reused by all of its blocks.
    pub fn encode(
        &self,
        tape: &mut Tape,
        reg: &ParamRegistry,
        image: &Tensor,
        flow_rgb: &Tensor,
    ) -> Result<Pyramid, TensorError> {
        let (h, w) = self.check_input(image, flow_rgb)?;
        let mut i_grid = tape.constant(Self::normalize_input(image));
        let mut o_grid = tape.constant(Self::normalize_input(flow_rgb));

        let mut stages = Vec::with_capacity(4);
        for (idx, stage) in self.stages.iter().enumerate() {
            let (mut i_tokens, sh, sw) = stage.patch.forward(tape, reg, i_grid)?;
            let (mut o_tokens, _, _) = stage.patch.forward(tape, reg, o_grid)?;
            let mask_logits = stage.mask_head.forward(tape, reg, i_tokens, sh, sw)?;
            let mut attn = None;
            for block in &stage.blocks {
                let (i_next, o_next, internals) =
                    block.forward(tape, reg, i_tokens, o_tokens, mask_logits, sh, sw)?;
                i_tokens = i_next;
                o_tokens = o_next;
                attn = Some(internals);
            }
            if idx + 1 < 4 {
                let c = self.cfg.channels[idx];
                let i_cn = tape.permute(i_tokens, &[1, 0])?;
                i_grid = tape.reshape(i_cn, &[c, sh, sw])?;
                let o_cn = tape.permute(o_tokens, &[1, 0])?;
                o_grid = tape.reshape(o_cn, &[c, sh, sw])?;
            }
            stages.push(StageOut {
                i_tokens,
                o_tokens,
                h: sh,
                w: sw,
                mask_logits,
                attn,
            });
        }
        Ok(Pyramid {
            stages,
            input_hw: (h, w),
        })
    }

    /// Encoder plus decoder: returns full-resolution logits `[2, H, W]` and
    /// the feature pyramid.
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &ParamRegistry,
        image: &Tensor,
        flow_rgb: &Tensor,
    ) -> Result<(Var, Pyramid), TensorError> {
        let pyramid = self.encode(tape, reg, image, flow_rgb)?;
        let logits = self.decoder.forward(tape, reg, &pyramid)?;
        Ok((logits, pyramid))
    }
}
