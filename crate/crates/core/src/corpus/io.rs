//! On-disk corpus layout: `corpus.jsonl`, `unlabeled.txt`, `grammar.json` and
//! `speakers.json` in one directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::grammar::IntentGrammar;
use super::speaker::SpeakerProfile;
use super::splits::{Corpus, CorpusSplits, Split};
use super::synth::Utterance;
use crate::error::{Result, SluError};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const UNLABELED_FILE: &str = "unlabeled.txt";
pub const GRAMMAR_FILE: &str = "grammar.json";
pub const SPEAKERS_FILE: &str = "speakers.json";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    split: Split,
    speaker_id: String,
    template_id: usize,
    intent: String,
    transcript: Vec<String>,
    n_frames: usize,
    feat_dim: usize,
    frames_b64: String,
}

pub fn encode_frames(frames: &[f64]) -> String {
    let bytes: Vec<u8> = frames.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_frames(blob: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(blob).map_err(|e| format!("bad base-64 frame blob: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("frame blob has {} bytes, not a multiple of 8", bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

/// Writes one JSON record per utterance, in split then id order.
pub fn write_utterances(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SluError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for split in Split::ALL {
        for id in corpus.splits.ids(split) {
            let u = corpus
                .utterances
                .get(id)
                .ok_or_else(|| SluError::invalid(format!("split lists unknown utterance {id}")))?;
            let rec = Record {
                id: u.id.clone(),
                split,
                speaker_id: u.speaker_id.clone(),
                template_id: u.template_id,
                intent: u.intent.clone(),
                transcript: u.transcript.clone(),
                n_frames: u.n_frames,
                feat_dim: u.feat_dim,
                frames_b64: encode_frames(&u.frames),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| SluError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| SluError::io(path, e))
}

/// Reads utterances and split membership from a JSONL file.
pub fn read_utterances(path: &Path) -> Result<(BTreeMap<String, Utterance>, CorpusSplits)> {
    let file = fs::File::open(path).map_err(|e| SluError::io(path, e))?;
    let mut utterances = BTreeMap::new();
    let mut splits = CorpusSplits::default();
    let parse_err = |line: usize, record: Option<&str>, msg: String| SluError::Parse {
        path: path.to_path_buf(),
        line,
        record: record.unwrap_or("?").to_owned(),
        msg,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SluError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, None, e.to_string()))?;
        let frames = decode_frames(&rec.frames_b64).map_err(|m| parse_err(line_no, Some(&rec.id), m))?;
        if rec.n_frames == 0 || rec.feat_dim == 0 || rec.n_frames * rec.feat_dim != frames.len() {
            return Err(parse_err(
                line_no,
                Some(&rec.id),
                format!(
                    "header says {} frames of dimension {} but the blob holds {} values",
                    rec.n_frames,
                    rec.feat_dim,
                    frames.len()
                ),
            ));
        }
        if utterances.contains_key(&rec.id) {
            return Err(parse_err(line_no, Some(&rec.id), "duplicate utterance id".into()));
        }
        splits.ids_mut(rec.split).push(rec.id.clone());
        utterances.insert(
            rec.id.clone(),
            Utterance {
                id: rec.id,
                speaker_id: rec.speaker_id,
                template_id: rec.template_id,
                intent: rec.intent,
                transcript: rec.transcript,
                n_frames: rec.n_frames,
                feat_dim: rec.feat_dim,
                frames,
            },
        );
    }
    Ok((utterances, splits))
}

pub fn write_unlabeled(path: &Path, text: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    for sent in text {
        s.push_str(&sent.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| SluError::io(path, e))
}

pub fn read_unlabeled(path: &Path) -> Result<Vec<Vec<String>>> {
    let s = fs::read_to_string(path).map_err(|e| SluError::io(path, e))?;
    Ok(s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s).map_err(|e| SluError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| SluError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| SluError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        record: "?".into(),
        msg: e.to_string(),
    })
}

/// Writes the corpus directory; returns the paths written.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SluError::io(dir, e))?;
    let paths: Vec<PathBuf> =
        [CORPUS_FILE, UNLABELED_FILE, GRAMMAR_FILE, SPEAKERS_FILE].iter().map(|f| dir.join(f)).collect();
    write_utterances(&paths[0], corpus)?;
    write_unlabeled(&paths[1], &corpus.splits.unlabeled_text)?;
    write_json(&paths[2], &corpus.grammar)?;
    write_json(&paths[3], &corpus.speakers)?;
    Ok(paths)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let (utterances, mut splits) = read_utterances(&dir.join(CORPUS_FILE))?;
    splits.unlabeled_text = read_unlabeled(&dir.join(UNLABELED_FILE))?;
    let grammar: IntentGrammar = read_json(&dir.join(GRAMMAR_FILE))?;
    let speakers: Vec<SpeakerProfile> = read_json(&dir.join(SPEAKERS_FILE))?;
    Ok(Corpus { grammar, speakers, utterances, splits })
}
