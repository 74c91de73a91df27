use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grammar::IntentGrammar;
use super::speaker::SpeakerProfile;
use crate::error::{Result, SluError};

/// Seconds per frame.
pub const FRAME_PERIOD: f64 = 0.01;

/// Frames covering the first `seconds` of audio.
pub fn frames_for_seconds(seconds: f64) -> usize {
    (seconds / FRAME_PERIOD).round().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub template_id: usize,
    pub intent: String,
    pub transcript: Vec<String>,
    pub n_frames: usize,
    pub feat_dim: usize,
    /// `n_frames × feat_dim`, row-major.
    pub frames: Vec<f64>,
}

impl Utterance {
    pub fn duration_seconds(&self) -> f64 {
        self.n_frames as f64 * FRAME_PERIOD
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    /// The first `n` frames (all of them if `n` exceeds the length, at least one).
    pub fn prefix_frames(&self, n: usize) -> &[f64] {
        let n = n.clamp(1, self.n_frames);
        &self.frames[..n * self.feat_dim]
    }
}

/// Frame count for one spoken word.
pub fn word_frames(grammar: &IntentGrammar, word: &str, rate: f64) -> usize {
    let raw = grammar.config.frames_per_char * word.chars().count() as f64 * rate;
    (raw.round() as usize).max(2)
}

/// Voices `words` with `speaker`; returns the frame matrix.
pub fn synthesize_words(
    grammar: &IntentGrammar,
    words: &[String],
    speaker: &SpeakerProfile,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let d = grammar.feat_dim();
    speaker.validate(d)?;
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(SluError::invalid(format!("noise level must be non-negative, got {noise_level}")));
    }
    let mut frames = Vec::new();
    let mut voiced = vec![0.0; d];
    for w in words {
        let idx = grammar
            .word_index(w)
            .ok_or_else(|| SluError::invalid(format!("word `{w}` is not in the lexicon")))?;
        speaker.apply(grammar.prototype(idx), &mut voiced);
        for _ in 0..word_frames(grammar, w, speaker.rate) {
            if noise_level == 0.0 {
                frames.extend_from_slice(&voiced);
            } else {
                frames.extend(voiced.iter().map(|v| v + noise_level * rng.sample::<f64, _>(StandardNormal)));
            }
        }
    }
    if frames.is_empty() {
        return Err(SluError::invalid("cannot synthesize an empty word sequence"));
    }
    Ok(frames)
}

pub fn synthesize_utterance(
    grammar: &IntentGrammar,
    template_id: usize,
    speaker: &SpeakerProfile,
    noise_level: f64,
    seed: u64,
) -> Result<Utterance> {
    let template = grammar.template(template_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = synthesize_words(grammar, &template.words, speaker, noise_level, &mut rng)?;
    let d = grammar.feat_dim();
    Ok(Utterance {
        id: format!("t{template_id}-{}-{seed:016x}", speaker.speaker_id),
        speaker_id: speaker.speaker_id.clone(),
        template_id,
        intent: grammar.intents[template.intent].label.clone(),
        transcript: template.words.clone(),
        n_frames: frames.len() / d,
        feat_dim: d,
        frames,
    })
}
