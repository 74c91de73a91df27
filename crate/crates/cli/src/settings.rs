use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dslu::autodiff::AdamConfig;
use dslu::corpus::{CorpusConfig, GrammarConfig};
use dslu::infer::{ConfidenceMode, InferenceOptions};
use dslu::model::ModelConfig;
use dslu::train::{SpecMaskConfig, Stage, TrainConfig};

use crate::CliError;

/// Every tunable, flat. Config files and `--set` use these names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub workers: usize,

    pub intents: usize,
    pub templates_per_intent: usize,
    pub late_fraction: f64,
    pub feat_dim: usize,
    pub frames_per_char: f64,
    pub n_train: usize,
    pub n_test_each: usize,
    pub n_dev: usize,
    pub n_speakers: usize,
    pub n_heldout_speakers: usize,
    pub noise_level: f64,
    pub n_unlabeled: usize,

    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub pass1_layers: usize,
    pub sem_dim: usize,
    pub sem_heads: usize,
    pub sem_ffn_dim: usize,
    pub sem_layers: usize,
    pub deliberation_layers: usize,
    pub deliberation_full_attention: bool,
    pub pass2_layers: usize,
    pub subsample: usize,
    pub dropout: f64,

    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
    pub joint_update: bool,
    pub dev_slice: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_feat_masks: usize,
    pub max_feat_width: usize,

    pub beam: usize,
    pub max_len: usize,
    pub confidence: ConfidenceMode,
    pub threshold: f64,
    /// Seconds of audio for the first pass; `inf` is full audio.
    pub prefix: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let g = GrammarConfig::default();
        let c = CorpusConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::for_stage(Stage::Stage1);
        let i = InferenceOptions::default();
        Settings {
            seed: 1,
            workers: 1,
            intents: g.n_intents,
            templates_per_intent: g.n_templates_per_intent,
            late_fraction: g.late_fraction,
            feat_dim: g.feat_dim,
            frames_per_char: g.frames_per_char,
            n_train: c.n_train,
            n_test_each: c.n_test_each,
            n_dev: c.n_dev,
            n_speakers: c.n_speakers,
            n_heldout_speakers: c.n_heldout_speakers,
            noise_level: c.noise_level,
            n_unlabeled: c.n_unlabeled,
            d_model: m.d_model,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim,
            encoder_layers: m.encoder_layers,
            pass1_layers: m.pass1_layers,
            sem_dim: m.sem_dim,
            sem_heads: m.sem_heads,
            sem_ffn_dim: m.sem_ffn_dim,
            sem_layers: m.sem_layers,
            deliberation_layers: m.deliberation_layers,
            deliberation_full_attention: m.deliberation_full_attention,
            pass2_layers: m.pass2_layers,
            subsample: m.subsample,
            dropout: m.dropout,
            pretrain_epochs: TrainConfig::for_stage(Stage::PretrainLm).epochs,
            stage1_epochs: t.epochs,
            stage2_epochs: TrainConfig::for_stage(Stage::Stage2).epochs,
            batch_size: t.batch_size,
            peak_lr: t.adam.peak_lr,
            warmup_steps: t.adam.warmup_steps,
            label_smoothing: t.label_smoothing,
            grad_clip: t.grad_clip,
            joint_update: t.joint_update,
            dev_slice: t.dev_slice,
            n_time_masks: t.spec_mask.n_time_masks,
            max_time_width: t.spec_mask.max_time_width,
            n_feat_masks: t.spec_mask.n_feat_masks,
            max_feat_width: t.spec_mask.max_feat_width,
            beam: i.beam_width,
            max_len: i.max_len,
            confidence: i.confidence,
            threshold: 0.8,
            prefix: 2.0,
        }
    }
}

/// Parses one `key=value` override; the value is read as TOML, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let k = k.trim().to_owned();
    let v = v.trim();
    let value = match format!("x = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_owned()),
    };
    Ok((k, value))
}

impl Settings {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Settings::default()).expect("defaults serialize");
        let mut set = |k: &str, v: toml::Value, origin: &str| -> Result<(), CliError> {
            match table.get_mut(k) {
                Some(slot) => {
                    *slot = v;
                    Ok(())
                }
                None => Err(CliError::Usage(format!("unknown config key `{k}` in {origin}"))),
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: toml::Table =
                text.parse().map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            for (k, v) in parsed {
                set(&k, v, &path.display().to_string())?;
            }
        }
        for (k, v) in overrides {
            set(k, v.clone(), "flags")?;
        }
        let s: Settings = table.try_into().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.prefix.is_nan() || self.prefix <= 0.0 {
            return bad(format!("prefix must be positive or inf, got {}", self.prefix));
        }
        if self.workers == 0 || self.beam == 0 || self.max_len < 2 {
            return bad("workers and beam must be positive and max_len at least 2".into());
        }
        self.model_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for stage in [Stage::PretrainLm, Stage::Stage1, Stage::Stage2] {
            self.train_config(stage).validate(self.feat_dim).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn grammar_config(&self) -> GrammarConfig {
        GrammarConfig {
            n_intents: self.intents,
            n_templates_per_intent: self.templates_per_intent,
            late_fraction: self.late_fraction,
            feat_dim: self.feat_dim,
            frames_per_char: self.frames_per_char,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_train: self.n_train,
            n_test_each: self.n_test_each,
            n_dev: self.n_dev,
            n_speakers: self.n_speakers,
            n_heldout_speakers: self.n_heldout_speakers,
            noise_level: self.noise_level,
            n_unlabeled: self.n_unlabeled,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feat_dim: self.feat_dim,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            encoder_layers: self.encoder_layers,
            pass1_layers: self.pass1_layers,
            sem_dim: self.sem_dim,
            sem_heads: self.sem_heads,
            sem_ffn_dim: self.sem_ffn_dim,
            sem_layers: self.sem_layers,
            deliberation_layers: self.deliberation_layers,
            deliberation_full_attention: self.deliberation_full_attention,
            pass2_layers: self.pass2_layers,
            subsample: self.subsample,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let epochs = match stage {
            Stage::PretrainLm => self.pretrain_epochs,
            Stage::Stage1 => self.stage1_epochs,
            Stage::Stage2 => self.stage2_epochs,
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { peak_lr: self.peak_lr, warmup_steps: self.warmup_steps, ..AdamConfig::default() },
            label_smoothing: self.label_smoothing,
            dropout: self.dropout,
            spec_mask: SpecMaskConfig {
                n_time_masks: self.n_time_masks,
                max_time_width: self.max_time_width,
                n_feat_masks: self.n_feat_masks,
                max_feat_width: self.max_feat_width,
            },
            seed: self.seed,
            grad_clip: self.grad_clip,
            joint_update: self.joint_update,
            beam: self.beam,
            dev_slice: self.dev_slice,
            workers: self.workers,
        }
    }

    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions { beam_width: self.beam, max_len: self.max_len, confidence: self.confidence }
    }

    pub fn prefix_seconds(&self) -> Option<f64> {
        self.prefix.is_finite().then_some(self.prefix)
    }
}
