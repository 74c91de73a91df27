//! The two-pass deliberation model and its persistence.

mod checkpoint;
mod two_pass;
mod vocab;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use two_pass::{
    prefix, AcousticEmbedding, DecoderContext, ModelConfig, Pass, SemanticEmbedding, StageFlags, TwoPassModel,
};
pub use vocab::{TokenKind, Vocabulary, BOS, EOS, MASK, PAD};
