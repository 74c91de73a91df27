use serde::{Deserialize, Serialize};

use crate::corpus::IntentGrammar;
use crate::error::{Result, SluError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
const N_SPECIAL: usize = 4;
const SPECIAL_NAMES: [&str; N_SPECIAL] = ["<pad>", "<s>", "</s>", "<mask>"];

/// Token ids: four specials, then one id per intent, then one per word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub intents: Vec<String>,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Intent(usize),
    Word(usize),
}

impl Vocabulary {
    pub fn new(intents: Vec<String>, words: Vec<String>) -> Result<Self> {
        let v = Vocabulary { intents, words };
        let mut all: Vec<&String> = v.intents.iter().chain(&v.words).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n || v.intents.is_empty() || v.words.is_empty() {
            return Err(SluError::invalid("vocabulary needs distinct, non-empty intent and word lists"));
        }
        Ok(v)
    }

    pub fn from_grammar(grammar: &IntentGrammar) -> Result<Self> {
        Self::new(grammar.intents.iter().map(|i| i.label.clone()).collect(), grammar.lexicon.clone())
    }

    pub fn size(&self) -> usize {
        N_SPECIAL + self.intents.len() + self.words.len()
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn intent_range(&self) -> std::ops::Range<usize> {
        N_SPECIAL..N_SPECIAL + self.intents.len()
    }

    pub fn word_range(&self) -> std::ops::Range<usize> {
        let start = N_SPECIAL + self.intents.len();
        start..start + self.words.len()
    }

    pub fn kind(&self, id: usize) -> Result<TokenKind> {
        if id < N_SPECIAL {
            Ok(TokenKind::Special)
        } else if self.intent_range().contains(&id) {
            Ok(TokenKind::Intent(id - N_SPECIAL))
        } else if self.word_range().contains(&id) {
            Ok(TokenKind::Word(id - self.word_range().start))
        } else {
            Err(SluError::TokenOutOfRange { id, size: self.size() })
        }
    }

    pub fn is_word(&self, id: usize) -> bool {
        self.word_range().contains(&id)
    }

    pub fn is_intent(&self, id: usize) -> bool {
        self.intent_range().contains(&id)
    }

    pub fn intent_id(&self, label: &str) -> Result<usize> {
        self.intents
            .iter()
            .position(|l| l == label)
            .map(|i| i + N_SPECIAL)
            .ok_or_else(|| SluError::invalid(format!("unknown intent `{label}`")))
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i + self.word_range().start)
            .ok_or_else(|| SluError::invalid(format!("unknown word `{word}`")))
    }

    pub fn intent_label(&self, id: usize) -> Result<&str> {
        match self.kind(id)? {
            TokenKind::Intent(i) => Ok(&self.intents[i]),
            _ => Err(SluError::invalid(format!("token {id} is not an intent"))),
        }
    }

    pub fn token_str(&self, id: usize) -> Result<&str> {
        Ok(match self.kind(id)? {
            TokenKind::Special => SPECIAL_NAMES[id],
            TokenKind::Intent(i) => &self.intents[i],
            TokenKind::Word(w) => &self.words[w],
        })
    }

    pub fn encode_words(&self, words: &[String]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.word_id(w)).collect()
    }

    pub fn decode_words(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| match self.kind(id)? {
                TokenKind::Word(w) => Ok(self.words[w].clone()),
                _ => Err(SluError::invalid(format!("token {id} is not a word"))),
            })
            .collect()
    }

    /// `[BOS, intent, words…, EOS]`
    pub fn target_sequence(&self, intent: &str, words: &[String]) -> Result<Vec<usize>> {
        let mut seq = vec![BOS, self.intent_id(intent)?];
        seq.extend(self.encode_words(words)?);
        seq.push(EOS);
        Ok(seq)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
