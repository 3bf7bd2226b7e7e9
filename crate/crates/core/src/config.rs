//! Model architecture configuration.

use serde::{Deserialize, Serialize};

/// How the coarse mask gates the image-branch attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Multiply logits by `sigmoid(mask)` before the softmax.
    #[default]
    Soft,
    /// Push logits to a large negative value wherever `sigmoid(mask) < 0.5`.
    Hard,
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Default input size; `forward` accepts any H, W divisible by 32.
    pub input_hw: (usize, usize),
    /// Attention blocks per stage.
    pub depths: [usize; 4],
    /// Token channels per stage.
    pub channels: [usize; 4],
    /// Attention heads per stage.
    pub heads: [usize; 4],
    /// Key/value spatial reduction factor per stage.
    pub sr_ratios: [usize; 4],
    /// Whether the image branch also attends over motion keys, per stage.
    pub cross_enabled: [bool; 4],
    /// Whether the coarse mask modulates image-branch logits, per stage.
    pub mask_enabled: [bool; 4],
    pub mask_mode: MaskMode,
    /// Unified channel width of the decoder.
    pub decoder_channels: usize,
    /// Weight of the per-stage auxiliary mask losses.
    pub lambda: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Medium,
    Large,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "large" => Ok(Self::Large),
            other => Err(format!("unknown model variant {other:?}")),
        }
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let full = Self {
            input_hw: (512, 512),
            depths: [2, 2, 2, 2],
            channels: [64, 128, 320, 512],
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            cross_enabled: [true; 4],
            mask_enabled: [true; 4],
            mask_mode: MaskMode::Soft,
            decoder_channels: 256,
            lambda: 0.1,
        };
        match v {
            Variant::Small => full,
            Variant::Medium => Self {
                depths: [3, 3, 6, 3],
                ..full
            },
            Variant::Large => Self {
                depths: [3, 3, 18, 3],
                ..full
            },
            Variant::Tiny => Self {
                input_hw: (64, 64),
                depths: [1, 1, 1, 1],
                channels: [16, 32, 64, 128],
                heads: [1, 1, 2, 4],
                sr_ratios: [4, 2, 1, 1],
                decoder_channels: 64,
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (h, w) = self.input_hw;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(format!("input {h}x{w} must be divisible by 32"));
        }
        for i in 0..4 {
            if self.depths[i] == 0 {
                return Err(format!("stage {i} depth must be >= 1"));
            }
            if self.heads[i] == 0 || self.channels[i] % self.heads[i] != 0 {
                return Err(format!(
                    "stage {i}: channels {} not divisible by heads {}",
                    self.channels[i], self.heads[i]
                ));
            }
            if self.sr_ratios[i] == 0 {
                return Err(format!("stage {i}: sr_ratio must be >= 1"));
            }
        }
        if self.decoder_channels == 0 {
            return Err("decoder_channels must be >= 1".into());
        }
        Ok(())
    }

    /// Token grid of stage `i` (0-based) for an input of `h` x `w`.
    pub fn stage_grid(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        let div = 1 << (i + 2);
        (h / div, w / div)
    }
}

/// Per-stage attention behaviour derived from the model config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub cross_enabled: bool,
    pub mask_enabled: bool,
    pub mask_mode: MaskMode,
}

impl AttentionConfig {
    pub fn for_stage(cfg: &ModelConfig, i: usize) -> Self {
        Self {
            channels: cfg.channels[i],
            num_heads: cfg.heads[i],
            sr_ratio: cfg.sr_ratios[i],
            cross_enabled: cfg.cross_enabled[i],
            mask_enabled: cfg.mask_enabled[i],
            mask_mode: cfg.mask_mode,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }
}
