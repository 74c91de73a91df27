#![allow(dead_code)]

use dslu::corpus::{build_grammar_with, generate_corpus, Corpus, CorpusConfig, GrammarConfig};
use dslu::model::{ModelConfig, TwoPassModel, Vocabulary};
use dslu::train::{Stage, TrainConfig};

/// Four intents, a few dozen utterances.
pub fn corpus(seed: u64) -> Corpus {
    let g = GrammarConfig { n_intents: 4, n_templates_per_intent: 4, ..Default::default() };
    let grammar = build_grammar_with(seed, &g).unwrap();
    let cfg = CorpusConfig {
        n_train: 32,
        n_test_each: 8,
        n_dev: 8,
        n_speakers: 6,
        n_heldout_speakers: 2,
        noise_level: 0.3,
        n_unlabeled: 60,
    };
    generate_corpus(&grammar, &cfg, seed).unwrap()
}

/// Width 8, one layer everywhere.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        pass1_layers: 1,
        sem_dim: 8,
        sem_heads: 2,
        sem_ffn_dim: 16,
        sem_layers: 1,
        deliberation_layers: 1,
        pass2_layers: 1,
        ..Default::default()
    }
}

pub fn model(c: &Corpus, seed: u64) -> TwoPassModel {
    TwoPassModel::new(tiny_config(), Vocabulary::from_grammar(&c.grammar).unwrap(), seed).unwrap()
}

pub fn config(stage: Stage, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::for_stage(stage);
    c.epochs = epochs;
    c.batch_size = 8;
    c.dev_slice = 4;
    c.adam.warmup_steps = 4;
    c.adam.peak_lr = 5e-3;
    c.seed = 11;
    c
}

/// Values of every parameter outside `prefixes`, bit for bit.
pub fn frozen_bits(m: &TwoPassModel, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    m.store
        .iter()
        .filter(|(_, p)| !prefixes.iter().any(|x| p.name.starts_with(x)))
        .map(|(_, p)| (p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()))
        .collect()
}
