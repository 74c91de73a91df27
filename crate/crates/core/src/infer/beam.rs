use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax;
use crate::error::{Result, SluError};
use crate::model::{Vocabulary, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    /// Log-probability of each generated token (everything after BOS).
    pub token_log_probs: Vec<f64>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis { tokens: vec![BOS], token_log_probs: Vec::new(), score: 0.0, finished: false }
    }

    fn extend(&self, token: usize, log_prob: f64) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut token_log_probs = self.token_log_probs.clone();
        token_log_probs.push(log_prob);
        Hypothesis { tokens, token_log_probs, score: self.score + log_prob, finished: token == EOS }
    }

    pub fn intent_token(&self) -> Option<usize> {
        self.tokens.get(1).copied()
    }

    /// Word tokens between the intent and EOS.
    pub fn transcript_tokens(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        if end <= 2 {
            &[]
        } else {
            &self.tokens[2..end]
        }
    }
}

/// Best-first order: higher score, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// Sorted best first. Finished hypotheses only, unless none finished.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached EOS within `max_len`; `hypotheses` holds the
    /// best unfinished ones.
    pub unfinished: bool,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

/// Token ids allowed at generated position `pos` (1-based, BOS is position 0):
/// an intent, at least one word, then words or EOS.
pub fn allowed_tokens(vocab: &Vocabulary, pos: usize) -> Vec<usize> {
    match pos {
        1 => vocab.intent_range().collect(),
        2 => vocab.word_range().collect(),
        _ => {
            let mut v: Vec<usize> = vocab.word_range().collect();
            v.push(EOS);
            v.sort_unstable();
            v
        }
    }
}

/// Log-probabilities of `allowed` after renormalizing `logits` over that set.
pub fn masked_log_probs(logits: &[f64], allowed: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = allowed.iter().map(|&t| logits[t]).collect();
    log_softmax(&sub)
}

/// Layout-constrained beam search. `step(prefix)` returns next-token logits
/// over the whole vocabulary. `max_len` counts generated tokens, EOS included.
pub fn beam_search<F>(mut step: F, vocab: &Vocabulary, beam_width: usize, max_len: usize) -> Result<BeamResult>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam_width == 0 {
        return Err(SluError::invalid("beam width must be at least 1"));
    }
    if max_len < 2 {
        return Err(SluError::invalid("max_len must be at least 2"));
    }
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for pos in 1..=max_len {
        let allowed = allowed_tokens(vocab, pos);
        let mut candidates = Vec::with_capacity(live.len() * allowed.len());
        for h in &live {
            let logits = step(&h.tokens)?;
            if logits.len() != vocab.size() {
                return Err(SluError::Shape { op: "beam_search", lhs: vec![logits.len()], rhs: vec![vocab.size()] });
            }
            for (&t, lp) in allowed.iter().zip(masked_log_probs(&logits, &allowed)) {
                candidates.push(h.extend(t, lp));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam_width);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        finished.sort_by(rank);
        // Scores never increase, so no live hypothesis can overtake the best finished one.
        let done = match (finished.first(), live.first()) {
            (_, None) => true,
            (Some(f), Some(l)) => f.score >= l.score,
            (None, Some(_)) => false,
        };
        if done {
            break;
        }
    }
    finished.truncate(beam_width);
    if finished.is_empty() {
        live.sort_by(rank);
        return Ok(BeamResult { hypotheses: live, unfinished: true });
    }
    Ok(BeamResult { hypotheses: finished, unfinished: false })
}

/// Which quantity serves as first-pass confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Posterior of the intent token.
    #[default]
    Intent,
    /// Probability of the whole decoded sequence.
    Sequence,
}

pub fn first_pass_confidence(hyp: &Hypothesis, mode: ConfidenceMode) -> Result<f64> {
    let first = hyp
        .token_log_probs
        .first()
        .ok_or_else(|| SluError::invalid("confidence of an empty hypothesis"))?;
    let lp = match mode {
        ConfidenceMode::Intent => *first,
        ConfidenceMode::Sequence => hyp.score,
    };
    Ok(lp.exp().clamp(0.0, 1.0))
}
