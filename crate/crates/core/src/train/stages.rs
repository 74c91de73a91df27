use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::specmask::apply_spec_mask;
use crate::autodiff::{optimizer_step, GradStore, OptimizerState, ParamSet, Scope, Tensor};
use crate::corpus::{Corpus, Split, Utterance, FRAME_PERIOD};
use crate::error::{Result, SluError};
use crate::infer::{decode, parallel_map, InferenceOptions};
use crate::model::{prefix, Pass, TwoPassModel, MASK};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Intent accuracy on the dev slice (stages 1 and 2).
    pub dev_intent_accuracy: Option<f64>,
    /// Masked-token loss on held-out sentences (pretraining).
    pub dev_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub final_checksum: String,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub optimizer: Option<OptimizerState>,
}

impl TrainLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| SluError::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Shared minibatch loop. `loss(model, scope, item, seed)` builds one item's
/// loss inside a training scope.
fn run_epochs<L, D>(
    model: &mut TwoPassModel,
    cfg: &TrainConfig,
    trainable: &ParamSet,
    n_items: usize,
    mut loss: L,
    mut dev: D,
    warnings: Vec<String>,
) -> Result<TrainLog>
where
    L: FnMut(&TwoPassModel, &Scope, usize, u64) -> Result<Tensor>,
    D: FnMut(&TwoPassModel) -> Result<(Option<f64>, Option<f64>)>,
{
    if n_items == 0 {
        return Err(SluError::invalid("no training items"));
    }
    let saved_dropout = model.config.dropout;
    model.config.dropout = cfg.dropout;
    let mut order_rng = substream(cfg.seed, "train-order");
    let mut item_rng = substream(cfg.seed, "train-items");
    let mut opt = OptimizerState::new(cfg.adam);
    let mut grads = GradStore::new(&model.store);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let outcome = (|| -> Result<()> {
        for epoch in 1..=cfg.epochs {
            let start = Instant::now();
            order.shuffle(&mut order_rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grads.reset();
                for &i in batch {
                    let seed = item_rng.next_u64();
                    let scope = Scope::train(&model.store, trainable, ChaCha8Rng::seed_from_u64(seed));
                    let l = loss(model, &scope, i, seed)?;
                    let v = l.item()?;
                    if !v.is_finite() {
                        return Err(SluError::invalid(format!("non-finite loss in epoch {epoch}")));
                    }
                    total += v;
                    l.backward()?;
                    scope.collect_grads(&mut grads);
                }
                grads.scale(1.0 / batch.len() as f64);
                grads.clip_global_norm(cfg.grad_clip);
                optimizer_step(&mut model.store, &mut opt, &grads, trainable)?;
            }
            model.config.dropout = saved_dropout;
            let (acc, dev_loss) = dev(model)?;
            model.config.dropout = cfg.dropout;
            let entry = EpochLog {
                epoch,
                mean_loss: total / n_items as f64,
                dev_intent_accuracy: acc,
                dev_loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} epoch {epoch}: loss {:.4} dev acc {:?} dev loss {:?} ({:.1}s)",
                cfg.stage,
                entry.mean_loss,
                entry.dev_intent_accuracy,
                entry.dev_loss,
                entry.wall_seconds
            );
            epochs.push(entry);
        }
        Ok(())
    })();
    model.config.dropout = saved_dropout;
    outcome?;
    Ok(TrainLog {
        stage: cfg.stage,
        config: *cfg,
        epochs,
        steps: opt.step,
        final_checksum: model.checksum(),
        warnings,
        optimizer: Some(opt),
    })
}

fn check_stage(cfg: &TrainConfig, want: Stage, feat_dim: usize) -> Result<()> {
    if cfg.stage != want {
        return Err(SluError::invalid(format!("config is for {}, expected {want}", cfg.stage)));
    }
    cfg.validate(feat_dim)
}

/// Replaces about 15% of tokens by MASK, at least one per sentence. Targets are
/// word-range offsets at masked positions and `usize::MAX` elsewhere.
pub fn mask_tokens<R: Rng>(model: &TwoPassModel, tokens: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let base = model.vocab.word_range().start;
    let mut chosen: Vec<bool> = tokens.iter().map(|_| rng.random::<f64>() < 0.15).collect();
    if !chosen.iter().any(|&c| c) {
        let i = rng.random_range(0..tokens.len());
        chosen[i] = true;
    }
    let input = tokens.iter().zip(&chosen).map(|(&t, &c)| if c { MASK } else { t }).collect();
    let targets = tokens.iter().zip(&chosen).map(|(&t, &c)| if c { t - base } else { usize::MAX }).collect();
    (input, targets)
}

fn mlm_loss(model: &TwoPassModel, scope: &Scope, input: &[usize], targets: &[usize], smoothing: f64) -> Result<Tensor> {
    let raw = model.encode_semantic_raw(scope, input)?;
    let words = model.vocab.word_range();
    let logits = model.mlm_logits(scope, &raw)?.slice(1, words.start, words.len())?;
    logits.cross_entropy(targets, smoothing, Some(usize::MAX))
}

/// Mean masked-token cross-entropy (no smoothing) with masks drawn from `seed`.
pub fn masked_lm_loss(model: &TwoPassModel, sentences: &[Vec<usize>], seed: u64) -> Result<f64> {
    if sentences.is_empty() {
        return Err(SluError::invalid("no sentences to score"));
    }
    let scope = Scope::eval(&model.store);
    let mut rng = substream(seed, "mlm-eval");
    let mut total = 0.0;
    for s in sentences {
        let (input, targets) = mask_tokens(model, s, &mut rng);
        total += mlm_loss(model, &scope, &input, &targets, 0.0)?.item()?;
    }
    Ok(total / sentences.len() as f64)
}

pub fn encode_sentences(model: &TwoPassModel, text: &[Vec<String>]) -> Result<Vec<Vec<usize>>> {
    text.iter()
        .filter(|s| !s.is_empty())
        .map(|s| model.vocab.encode_words(s))
        .collect()
}

/// Masked-token pretraining of the semantic encoder. The last sentences of
/// the pool (up to `dev_slice`, at most a tenth) are held out for the dev loss.
pub fn pretrain_semantic_encoder(model: &mut TwoPassModel, unlabeled: &[Vec<String>], cfg: &TrainConfig) -> Result<TrainLog> {
    check_stage(cfg, Stage::PretrainLm, model.config.feat_dim)?;
    let sentences = encode_sentences(model, unlabeled)?;
    if sentences.is_empty() {
        return Err(SluError::invalid("unlabeled text pool is empty"));
    }
    let n_dev = cfg.dev_slice.min(sentences.len() / 10);
    let (train, dev) = sentences.split_at(sentences.len() - n_dev);
    let trainable = model.params(&[prefix::SEMANTIC]);
    let smoothing = cfg.label_smoothing;
    let dev_seed = cfg.seed;
    let log = run_epochs(
        model,
        cfg,
        &trainable,
        train.len(),
        |m, scope, i, seed| {
            let (input, targets) = mask_tokens(m, &train[i], &mut substream(seed, "mlm"));
            mlm_loss(m, scope, &input, &targets, smoothing)
        },
        |m| Ok((None, if dev.is_empty() { None } else { Some(masked_lm_loss(m, dev, dev_seed)?) })),
        Vec::new(),
    )?;
    model.stages.pretrained_lm = true;
    Ok(log)
}

fn check_corpus(model: &TwoPassModel, utts: &[&Utterance]) -> Result<Vec<Vec<usize>>> {
    utts.iter()
        .map(|u| {
            if u.feat_dim != model.config.feat_dim {
                return Err(SluError::invalid(format!(
                    "utterance {} has {} features, model expects {}",
                    u.id, u.feat_dim, model.config.feat_dim
                )));
            }
            model.vocab.target_sequence(&u.intent, &u.transcript)
        })
        .collect()
}

fn slice<'a>(corpus: &'a Corpus, split: Split, n: usize) -> Vec<&'a Utterance> {
    corpus.split(split).into_iter().take(n).collect()
}

fn decode_opts(cfg: &TrainConfig) -> InferenceOptions {
    InferenceOptions { beam_width: cfg.beam, ..Default::default() }
}

/// First-pass intent accuracy on full audio.
pub fn first_pass_accuracy(model: &TwoPassModel, utts: &[&Utterance], opts: &InferenceOptions, workers: usize) -> Result<f64> {
    if utts.is_empty() {
        return Err(SluError::invalid("no utterances to score"));
    }
    let hits = parallel_map(utts, workers, |u| {
        Ok(crate::infer::infer_first_pass(model, &u.frames, None, opts)?.pass.intent == u.intent)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / utts.len() as f64)
}

/// Full-audio acoustic encoding and first-pass transcript, as consumed by stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPassCache {
    pub c_aco: Vec<f64>,
    pub c_aco_len: usize,
    pub transcript: Vec<usize>,
}

impl FirstPassCache {
    pub fn tensor(&self, d_model: usize) -> Result<Tensor> {
        Tensor::new(self.c_aco.clone(), &[self.c_aco_len, d_model])
    }
}

/// Runs the (frozen) first pass on every utterance.
pub fn first_pass_hypotheses(model: &TwoPassModel, utts: &[&Utterance], beam: usize, workers: usize) -> Result<Vec<FirstPassCache>> {
    let opts = InferenceOptions { beam_width: beam, ..Default::default() };
    parallel_map(utts, workers, |u| {
        let scope = Scope::eval(&model.store);
        let c = model.encode_acoustic(&scope, &u.frames, None)?;
        let beam = decode(model, &scope, Pass::First, &c.tensor, &opts)?;
        Ok(FirstPassCache {
            c_aco: c.tensor.data().to_vec(),
            c_aco_len: c.len(),
            transcript: beam.best().transcript_tokens().to_vec(),
        })
    })
}

/// Second-pass intent accuracy given cached first-pass outputs.
pub fn second_pass_accuracy(
    model: &TwoPassModel,
    utts: &[&Utterance],
    cache: &[FirstPassCache],
    opts: &InferenceOptions,
    workers: usize,
) -> Result<f64> {
    if utts.is_empty() || utts.len() != cache.len() {
        return Err(SluError::invalid("second-pass scoring needs one cache entry per utterance"));
    }
    let pairs: Vec<(&Utterance, &FirstPassCache)> = utts.iter().copied().zip(cache).collect();
    let hits = parallel_map(&pairs, workers, |(u, c)| {
        let scope = Scope::eval(&model.store);
        let c_aco = c.tensor(model.config.d_model)?;
        let sem = model.encode_semantic(&scope, &TwoPassModel::semantic_input(&c.transcript))?;
        let (c_del, _) = model.deliberate(&scope, &c_aco, &sem.projected)?;
        let beam = decode(model, &scope, Pass::Second, &c_del, opts)?;
        let intent = beam.best().intent_token().map(|t| model.vocab.intent_label(t)).transpose()?;
        Ok(intent == Some(u.intent.as_str()))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / utts.len() as f64)
}

/// Teacher-forced loss of `decoder` over `target` given a context.
fn sequence_loss(model: &TwoPassModel, scope: &Scope, pass: Pass, context: &Tensor, target: &[usize], smoothing: f64) -> Result<Tensor> {
    if target.len() < 2 {
        return Err(SluError::invalid("target sequence needs at least BOS and one token"));
    }
    let ctx = model.decoder_context(scope, pass, context)?;
    let (logits, _) = model.decoder_logits(scope, &ctx, &target[..target.len() - 1])?;
    logits.cross_entropy(&target[1..], smoothing, None)
}

/// First-pass loss of one utterance given its `[T × feat_dim]` frames.
pub fn stage1_loss(model: &TwoPassModel, scope: &Scope, frames: &Tensor, target: &[usize], smoothing: f64) -> Result<Tensor> {
    let secs = frames.shape()[0] as f64 * FRAME_PERIOD;
    let c = model.encode_acoustic_tensor(scope, frames, secs)?;
    sequence_loss(model, scope, Pass::First, &c.tensor, target, smoothing)
}

/// Second-pass loss given `c_aco` and the first-pass transcript.
pub fn stage2_loss(
    model: &TwoPassModel,
    scope: &Scope,
    c_aco: &Tensor,
    transcript: &[usize],
    target: &[usize],
    smoothing: f64,
) -> Result<Tensor> {
    let sem = model.encode_semantic(scope, &TwoPassModel::semantic_input(transcript))?;
    let (c_del, _) = model.deliberate(scope, c_aco, &sem.projected)?;
    sequence_loss(model, scope, Pass::Second, &c_del, target, smoothing)
}

/// Trains the acoustic encoder and first-pass decoder on
/// `[BOS, intent, words…, EOS]` targets.
pub fn train_stage1(model: &mut TwoPassModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog> {
    check_stage(cfg, Stage::Stage1, model.config.feat_dim)?;
    let train = corpus.split(Split::Train);
    let targets = check_corpus(model, &train)?;
    let dev = slice(corpus, Split::Dev, cfg.dev_slice);
    let trainable = model.params(&[prefix::ACOUSTIC, prefix::PASS1]);
    let f = model.config.feat_dim;
    let opts = decode_opts(cfg);
    let log = run_epochs(
        model,
        cfg,
        &trainable,
        train.len(),
        |m, scope, i, seed| {
            let u = train[i];
            let frames = apply_spec_mask(&u.frames, f, &cfg.spec_mask, seed);
            let x = Tensor::new(frames, &[u.n_frames, f])?;
            stage1_loss(m, scope, &x, &targets[i], cfg.label_smoothing)
        },
        |m| {
            let acc = if dev.is_empty() { None } else { Some(first_pass_accuracy(m, &dev, &opts, cfg.workers)?) };
            Ok((acc, None))
        },
        Vec::new(),
    )?;
    model.stages.stage1 = true;
    Ok(log)
}

/// Trains projection, deliberation encoder and second-pass decoder. The
/// semantic input is the frozen first pass's own transcript of each utterance.
pub fn train_stage2(model: &mut TwoPassModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog> {
    check_stage(cfg, Stage::Stage2, model.config.feat_dim)?;
    let mut warnings = Vec::new();
    if !model.stages.stage1 {
        warnings.push("stage 2 on a model without stage-1 training; first-pass transcripts are uninformative".to_owned());
    }
    if !model.stages.pretrained_lm {
        warnings.push("semantic encoder was not pretrained".to_owned());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let train = corpus.split(Split::Train);
    let targets = check_corpus(model, &train)?;
    let dev = slice(corpus, Split::Dev, cfg.dev_slice);
    let cache = first_pass_hypotheses(model, &train, cfg.beam, cfg.workers)?;
    let dev_cache = first_pass_hypotheses(model, &dev, cfg.beam, cfg.workers)?;
    let mut groups = vec![prefix::PROJECTION, prefix::DELIBERATION, prefix::PASS2];
    if cfg.joint_update {
        groups.push(prefix::ACOUSTIC);
    }
    let trainable = model.params(&groups);
    let f = model.config.feat_dim;
    let opts = decode_opts(cfg);
    let log = run_epochs(
        model,
        cfg,
        &trainable,
        train.len(),
        |m, scope, i, _| {
            let c_aco = if cfg.joint_update {
                let u = train[i];
                let x = Tensor::new(u.frames.clone(), &[u.n_frames, f])?;
                m.encode_acoustic_tensor(scope, &x, u.duration_seconds())?.tensor
            } else {
                cache[i].tensor(m.config.d_model)?
            };
            stage2_loss(m, scope, &c_aco, &cache[i].transcript, &targets[i], cfg.label_smoothing)
        },
        |m| {
            let acc = if dev.is_empty() {
                None
            } else {
                Some(second_pass_accuracy(m, &dev, &dev_cache, &opts, cfg.workers)?)
            };
            Ok((acc, None))
        },
        warnings,
    )?;
    model.stages.stage2 = true;
    Ok(log)
}
