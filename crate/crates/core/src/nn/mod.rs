//! Transformer building blocks.

mod attention;
mod frontend;
mod layers;

pub use attention::{
    attend_memory, causal_mask, multi_head_attention, AttentionConfig, AttentionMap, AttentionParams, Mask,
};
pub use frontend::{add_positions, position_encoding, subsample, subsampled_len};
pub use layers::{
    decoder_forward, decoder_forward_memory, encoder_forward, DecoderLayer, EncoderLayer, FeedForward, LayerNorm,
    Linear, Memory,
};
