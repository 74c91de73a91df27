use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::engine::{RoutedPrediction, Source};
use crate::corpus::Utterance;
use crate::error::{Result, SluError};

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub utt_id: String,
    pub intent_pred: String,
    pub intent_true: String,
    pub source: Source,
    pub confidence: f64,
    /// Transcript of the pass that produced `intent_pred`.
    pub transcript_pred: Vec<String>,
    pub t_pass1: f64,
    pub t_pass2: f64,
    pub t_total: f64,
    pub prefix_seconds: Option<f64>,
    pub transcript_true: Vec<String>,
    pub pass1_intent: String,
    pub pass1_transcript: Vec<String>,
    #[serde(default)]
    pub pass2_intent: Option<String>,
    #[serde(default)]
    pub pass2_transcript: Option<Vec<String>>,
    pub audio_seconds: f64,
    pub processed_seconds: f64,
}

impl PredictionRecord {
    pub fn new(utt: &Utterance, p: &RoutedPrediction) -> Self {
        let transcript_pred = match (p.source, &p.pass2_transcript) {
            (Source::SecondPass, Some(t)) => t.clone(),
            _ => p.pass1_transcript.clone(),
        };
        PredictionRecord {
            utt_id: utt.id.clone(),
            intent_pred: p.intent.clone(),
            intent_true: utt.intent.clone(),
            source: p.source,
            confidence: p.confidence,
            transcript_pred,
            t_pass1: p.timings.t_pass1,
            t_pass2: p.timings.t_pass2,
            t_total: p.timings.t_total,
            prefix_seconds: p.prefix_seconds,
            transcript_true: utt.transcript.clone(),
            pass1_intent: p.pass1_intent.clone(),
            pass1_transcript: p.pass1_transcript.clone(),
            pass2_intent: p.pass2_intent.clone(),
            pass2_transcript: p.pass2_transcript.clone(),
            audio_seconds: p.audio_seconds,
            processed_seconds: p.processed_seconds,
        }
    }
}

/// Writes records sorted by utterance id, one JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let file = fs::File::create(path).map_err(|e| SluError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in sorted {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| SluError::io(path, e))?;
    }
    w.flush().map_err(|e| SluError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| SluError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SluError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| SluError::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            record: "?".into(),
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
