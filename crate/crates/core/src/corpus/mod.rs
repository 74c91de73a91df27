//! Deterministic synthetic SLU corpus: grammar, speakers, frame synthesis,
//! splits and the on-disk format.

mod grammar;
mod io;
mod speaker;
mod splits;
mod synth;

pub use grammar::{build_grammar, build_grammar_with, GrammarConfig, Intent, IntentGrammar, Template};
pub use io::{
    decode_frames, encode_frames, read_corpus, read_unlabeled, read_utterances, write_corpus, write_unlabeled,
    write_utterances, CORPUS_FILE, GRAMMAR_FILE, SPEAKERS_FILE, UNLABELED_FILE,
};
pub use speaker::{generate_speakers, SpeakerProfile};
pub use splits::{generate_corpus, make_splits, Corpus, CorpusConfig, CorpusSplits, Split};
pub use synth::{frames_for_seconds, synthesize_utterance, synthesize_words, word_frames, Utterance, FRAME_PERIOD};
