//! Staged training: semantic-encoder pretraining, first pass, then deliberation.

mod config;
mod specmask;
mod stages;

pub use config::{SpecMaskConfig, Stage, TrainConfig};
pub use specmask::{apply_spec_mask, expected_masked_fraction};
pub use stages::{
    encode_sentences, first_pass_accuracy, first_pass_hypotheses, mask_tokens, masked_lm_loss,
    pretrain_semantic_encoder, second_pass_accuracy, stage1_loss, stage2_loss, train_stage1, train_stage2, EpochLog, FirstPassCache, TrainLog,
};
