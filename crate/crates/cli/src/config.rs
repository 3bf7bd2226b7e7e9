//! JSON run configuration for training.

use serde::Deserialize;
use simulflow_core::config::{MaskMode, ModelConfig, Variant};

/// `true`/`false` applied to all stages, or an explicit per-stage array.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum StageFlags {
    All(bool),
    PerStage([bool; 4]),
}

impl StageFlags {
    pub fn per_stage(self) -> [bool; 4] {
        match self {
            StageFlags::All(b) => [b; 4],
            StageFlags::PerStage(a) => a,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    /// Square input side; must be divisible by 32. Defaults per variant.
    #[serde(default)]
    pub input_size: Option<usize>,
    #[serde(default)]
    pub cross_attention: Option<StageFlags>,
    #[serde(default)]
    pub mask_attention: Option<StageFlags>,
    #[serde(default)]
    pub mask_mode: Option<MaskMode>,
    #[serde(default)]
    pub lambda: Option<f32>,
}

fn default_lr() -> f32 {
    3e-4
}
fn default_steps() -> u64 {
    2000
}
fn default_batch() -> usize {
    4
}
fn default_power() -> f32 {
    0.9
}
fn default_val_every() -> u64 {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Mandatory: all sampling and initialization derive from it.
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_power")]
    pub schedule_power: f32,
    #[serde(default = "default_val_every")]
    pub val_every: u64,
}

/// Top-level run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let mut cfg = ModelConfig::variant(self.model.variant);
        if let Some(size) = self.model.input_size {
            cfg.input_hw = (size, size);
        }
        if let Some(f) = self.model.cross_attention {
            cfg.cross_enabled = f.per_stage();
        }
        if let Some(f) = self.model.mask_attention {
            cfg.mask_enabled = f.per_stage();
        }
        if let Some(m) = self.model.mask_mode {
            cfg.mask_mode = m;
        }
        if let Some(l) = self.model.lambda {
            cfg.lambda = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults() {
        let json = r#"{"model": {"variant": "tiny"}, "train": {"seed": 7}}"#;
        let rc: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(rc.train.lr, 3e-4);
        assert_eq!(rc.train.steps, 2000);
        let cfg = rc.model_config().unwrap();
        assert_eq!(cfg.depths, [1, 1, 1, 1]);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_seed() {
        let json = r#"{"model": {"variant": "tiny"}, "train": {"seed": 1, "bogus": 2}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let json = r#"{"model": {"variant": "tiny"}, "train": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn stage_flags_forms() {
        let json = r#"{"model": {"variant": "tiny", "cross_attention": false,
                       "mask_attention": [true, false, true, false]},
                      "train": {"seed": 1}}"#;
        let rc: RunConfig = serde_json::from_str(json).unwrap();
        let cfg = rc.model_config().unwrap();
        assert_eq!(cfg.cross_enabled, [false; 4]);
        assert_eq!(cfg.mask_enabled, [true, false, true, false]);
    }
}
