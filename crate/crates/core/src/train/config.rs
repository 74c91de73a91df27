use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Result, SluError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainLm,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainLm => "pretrain_lm",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = SluError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_lm" => Ok(Stage::PretrainLm),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            _ => Err(SluError::invalid(format!("unknown stage `{s}`"))),
        }
    }
}

/// Time and feature band masking applied to training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecMaskConfig {
    pub n_time_masks: usize,
    /// In frames.
    pub max_time_width: usize,
    pub n_feat_masks: usize,
    pub max_feat_width: usize,
}

impl Default for SpecMaskConfig {
    fn default() -> Self {
        SpecMaskConfig { n_time_masks: 2, max_time_width: 10, n_feat_masks: 1, max_feat_width: 2 }
    }
}

impl SpecMaskConfig {
    pub const NONE: SpecMaskConfig = SpecMaskConfig { n_time_masks: 0, max_time_width: 0, n_feat_masks: 0, max_feat_width: 0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    /// Overrides the model's dropout rate while training.
    pub dropout: f64,
    pub spec_mask: SpecMaskConfig,
    pub seed: u64,
    pub grad_clip: f64,
    /// Stage 2 only: also update the acoustic encoder.
    pub joint_update: bool,
    /// Beam width for first-pass hypotheses and dev decoding.
    pub beam: usize,
    /// Dev utterances (or held-out sentences) scored after each epoch; 0 disables.
    pub dev_slice: usize,
    /// Threads for first-pass hypothesis generation. Results do not depend on it.
    pub workers: usize,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let epochs = match stage {
            Stage::PretrainLm => 6,
            Stage::Stage1 => 20,
            Stage::Stage2 => 12,
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: 16,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            dropout: 0.1,
            spec_mask: SpecMaskConfig::default(),
            seed: 0,
            grad_clip: 5.0,
            joint_update: false,
            beam: 4,
            dev_slice: 100,
            workers: 1,
        }
    }

    pub fn validate(&self, feat_dim: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SluError::invalid(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SluError::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.spec_mask.max_feat_width > feat_dim {
            return Err(SluError::invalid(format!(
                "feature mask width {} exceeds feature dimension {feat_dim}",
                self.spec_mask.max_feat_width
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.beam == 0 {
            return Err(SluError::invalid("epochs, batch size and beam must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(SluError::invalid("gradient clip must be positive"));
        }
        if self.adam.peak_lr.is_nan() || self.adam.peak_lr <= 0.0 {
            return Err(SluError::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}
