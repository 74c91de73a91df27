use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::beam::{beam_search, first_pass_confidence, BeamResult, ConfidenceMode, Hypothesis};
use crate::autodiff::{Scope, Tensor};
use crate::error::{Result, SluError};
use crate::model::{AcousticEmbedding, Pass, TwoPassModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub beam_width: usize,
    /// Generated tokens allowed per hypothesis, EOS included.
    pub max_len: usize,
    pub confidence: ConfidenceMode,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { beam_width: 4, max_len: 24, confidence: ConfidenceMode::Intent }
    }
}

/// Beam search with one decoder over a fixed context.
pub fn decode(model: &TwoPassModel, scope: &Scope, pass: Pass, context: &Tensor, opts: &InferenceOptions) -> Result<BeamResult> {
    let ctx = model.decoder_context(scope, pass, context)?;
    let v = model.vocab.size();
    let step = |prefix: &[usize]| -> Result<Vec<f64>> {
        let (logits, _) = model.decoder_logits(scope, &ctx, prefix)?;
        let rows = logits.shape()[0];
        Ok(logits.data()[(rows - 1) * v..].to_vec())
    };
    beam_search(step, &model.vocab, opts.beam_width, opts.max_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassOutput {
    pub intent: String,
    pub transcript: Vec<String>,
    pub transcript_tokens: Vec<usize>,
    pub hypothesis: Hypothesis,
    pub unfinished: bool,
    /// Wall-clock seconds spent in this pass.
    pub elapsed: f64,
}

impl PassOutput {
    fn from_beam(model: &TwoPassModel, beam: BeamResult, elapsed: f64) -> Result<Self> {
        let hypothesis = beam.best().clone();
        let intent_token = hypothesis
            .intent_token()
            .ok_or_else(|| SluError::invalid("decoder produced no intent"))?;
        let transcript_tokens = hypothesis.transcript_tokens().to_vec();
        Ok(PassOutput {
            intent: model.vocab.intent_label(intent_token)?.to_owned(),
            transcript: model.vocab.decode_words(&transcript_tokens)?,
            transcript_tokens,
            hypothesis,
            unfinished: beam.unfinished,
            elapsed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstPassOutput {
    pub pass: PassOutput,
    pub confidence: f64,
    /// Audio seconds actually encoded.
    pub audio_seconds: f64,
}

/// Encodes the first `prefix_seconds` of `frames` and decodes with the first pass.
pub fn infer_first_pass(
    model: &TwoPassModel,
    frames: &[f64],
    prefix_seconds: Option<f64>,
    opts: &InferenceOptions,
) -> Result<FirstPassOutput> {
    let start = Instant::now();
    let scope = Scope::eval(&model.store);
    let c_aco = model.encode_acoustic(&scope, frames, prefix_seconds)?;
    let beam = decode(model, &scope, Pass::First, &c_aco.tensor, opts)?;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = PassOutput::from_beam(model, beam, elapsed)?;
    let confidence = first_pass_confidence(&pass.hypothesis, opts.confidence)?;
    Ok(FirstPassOutput { pass, confidence, audio_seconds: c_aco.source_seconds })
}

/// Deliberation over full-audio `c_aco` (computed here unless supplied) and
/// the first-pass transcript.
pub fn infer_second_pass(
    model: &TwoPassModel,
    frames: &[f64],
    cached_c_aco: Option<&AcousticEmbedding>,
    pass1_transcript: &[usize],
    opts: &InferenceOptions,
) -> Result<PassOutput> {
    let start = Instant::now();
    let scope = Scope::eval(&model.store);
    let computed;
    let c_aco = match cached_c_aco {
        Some(c) => c,
        None => {
            computed = model.encode_acoustic(&scope, frames, None)?;
            &computed
        }
    };
    let c_sem = model.encode_semantic(&scope, &TwoPassModel::semantic_input(pass1_transcript))?;
    let (c_del, _) = model.deliberate(&scope, &c_aco.tensor, &c_sem.projected)?;
    let beam = decode(model, &scope, Pass::Second, &c_del, opts)?;
    PassOutput::from_beam(model, beam, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    FirstPass,
    SecondPass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub t_pass1: f64,
    /// Zero when the second pass was skipped.
    pub t_pass2: f64,
    pub t_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedPrediction {
    pub intent: String,
    pub source: Source,
    pub confidence: f64,
    pub pass1_intent: String,
    pub pass1_transcript: Vec<String>,
    pub pass2_intent: Option<String>,
    pub pass2_transcript: Option<Vec<String>>,
    pub timings: Timings,
    pub prefix_seconds: Option<f64>,
    /// Full utterance duration.
    pub audio_seconds: f64,
    /// Audio covered by the pass that produced `intent`.
    pub processed_seconds: f64,
    /// Wall time of the second pass whenever it ran, chosen or not.
    pub second_pass_seconds: Option<f64>,
}

/// First pass on the prefix; the second pass runs on the full audio, fed the
/// prefix transcript, only when confidence falls below `threshold`.
pub fn route(
    model: &TwoPassModel,
    frames: &[f64],
    threshold: f64,
    prefix_seconds: Option<f64>,
    opts: &InferenceOptions,
) -> Result<RoutedPrediction> {
    run(model, frames, threshold, prefix_seconds, opts, false)
}

/// Like [`route`], but the second pass runs for every utterance so both
/// passes can be scored. The chosen intent and `t_total` still follow the
/// threshold; `t_pass2` stays 0 when the first pass is chosen.
pub fn evaluate_both(
    model: &TwoPassModel,
    frames: &[f64],
    threshold: f64,
    prefix_seconds: Option<f64>,
    opts: &InferenceOptions,
) -> Result<RoutedPrediction> {
    run(model, frames, threshold, prefix_seconds, opts, true)
}

fn run(
    model: &TwoPassModel,
    frames: &[f64],
    threshold: f64,
    prefix_seconds: Option<f64>,
    opts: &InferenceOptions,
    both: bool,
) -> Result<RoutedPrediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SluError::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let start = Instant::now();
    let first = infer_first_pass(model, frames, prefix_seconds, opts)?;
    let t_pass1 = start.elapsed().as_secs_f64();
    let n_frames = frames.len() / model.config.feat_dim;
    let audio_seconds = n_frames as f64 * crate::corpus::FRAME_PERIOD;
    let confident = first.confidence >= threshold;
    let second = if !confident || both {
        let t = Instant::now();
        let s = infer_second_pass(model, frames, None, &first.pass.transcript_tokens, opts)?;
        Some((s, t.elapsed().as_secs_f64()))
    } else {
        None
    };
    let second_pass_seconds = second.as_ref().map(|s| s.1);
    let second = second.map(|s| s.0);
    let t_total = if confident { t_pass1 } else { start.elapsed().as_secs_f64() };
    let (intent, source, processed_seconds) = match (&second, confident) {
        (Some(s), false) => (s.intent.clone(), Source::SecondPass, audio_seconds),
        _ => (first.pass.intent.clone(), Source::FirstPass, first.audio_seconds),
    };
    Ok(RoutedPrediction {
        intent,
        source,
        confidence: first.confidence,
        pass1_intent: first.pass.intent,
        pass1_transcript: first.pass.transcript,
        pass2_intent: second.as_ref().map(|s| s.intent.clone()),
        pass2_transcript: second.map(|s| s.transcript),
        timings: Timings { t_pass1, t_pass2: if confident { 0.0 } else { (t_total - t_pass1).max(0.0) }, t_total },
        prefix_seconds,
        audio_seconds,
        processed_seconds,
        second_pass_seconds,
    })
}
