use rand::Rng;

use super::attention::{attend_memory, causal_mask, multi_head_attention, AttentionConfig, AttentionMap, AttentionParams, Mask};
use crate::autodiff::{ParamId, ParamStore, Scope, Tensor};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W` of shape `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.random_range(-limit..limit)).collect();
        let weight = store.add(&format!("{name}.w"), &[d_in, d_out], w)?;
        let bias = if bias { Some(store.add(&format!("{name}.b"), &[d_out], vec![0.0; d_out])?) } else { None };
        Ok(Linear { weight, bias })
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.w"), &[d_in, d_out], vec![0.0; d_in * d_out])?;
        let bias = Some(store.add(&format!("{name}.b"), &[d_out], vec![0.0; d_out])?);
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, scope: &Scope, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&scope.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(&scope.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.g"), &[d], vec![1.0; d])?,
            bias: store.add(&format!("{name}.b"), &[d], vec![0.0; d])?,
        })
    }

    pub fn forward(&self, scope: &Scope, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&scope.param(self.gain), &scope.param(self.bias), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, ffn, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), ffn, d, true, rng)?,
        })
    }

    pub fn forward(&self, scope: &Scope, x: &Tensor) -> Result<Tensor> {
        self.down.forward(scope, &self.up.forward(scope, x)?.gelu())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: AttentionParams::new(store, &format!("{name}.att"), d, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNorm,
    pub cross_attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderLayer {
            ln_self: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            self_attn: AttentionParams::new(store, &format!("{name}.self"), d, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            cross_attn: AttentionParams::new(store, &format!("{name}.cross"), d, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln3"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng)?,
        })
    }
}

/// Pre-LN residual block: `x + dropout(f(LN(x)))`.
fn residual(
    scope: &Scope,
    x: &Tensor,
    ln: &LayerNorm,
    p: f64,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let y = f(&ln.forward(scope, x)?)?;
    x.add(&scope.dropout(&y, p)?)
}

pub fn encoder_forward(
    scope: &Scope,
    layers: &[EncoderLayer],
    x: &Tensor,
    mask: Option<&Mask>,
    config: &AttentionConfig,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let mut h = x.clone();
    let mut maps = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        h = residual(scope, &h, &layer.ln_attn, config.dropout, |n| {
            let (out, m) = multi_head_attention(scope, &layer.attn, n, n, mask, config, i)?;
            maps.extend(m);
            Ok(out)
        })?;
        h = residual(scope, &h, &layer.ln_ffn, config.dropout, |n| layer.ffn.forward(scope, n))?;
    }
    Ok((h, maps))
}

/// Cross-attention keys and values of a fixed context, one pair per layer.
#[derive(Debug, Clone)]
pub struct Memory {
    pub kv: Vec<(Tensor, Tensor)>,
    pub len: usize,
}

impl Memory {
    pub fn new(scope: &Scope, layers: &[DecoderLayer], context: &Tensor) -> Result<Self> {
        let len = context.dims2()?.0;
        let kv = layers
            .iter()
            .map(|l| l.cross_attn.project_memory(scope, context))
            .collect::<Result<Vec<_>>>()?;
        Ok(Memory { kv, len })
    }
}

/// Causal decoder stack over target embeddings, cross-attending `context`.
/// Self-attention maps come first in the returned list, then cross-attention maps, per layer.
pub fn decoder_forward(
    scope: &Scope,
    layers: &[DecoderLayer],
    tokens: &Tensor,
    context: &Tensor,
    self_mask: Option<&Mask>,
    config: &AttentionConfig,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let memory = Memory::new(scope, layers, context)?;
    decoder_forward_memory(scope, layers, tokens, &memory, self_mask, config)
}

pub fn decoder_forward_memory(
    scope: &Scope,
    layers: &[DecoderLayer],
    tokens: &Tensor,
    memory: &Memory,
    self_mask: Option<&Mask>,
    config: &AttentionConfig,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let len = tokens.dims2()?.0;
    let default_mask;
    let self_mask = match self_mask {
        Some(m) => m,
        None => {
            default_mask = causal_mask(len);
            &default_mask
        }
    };
    let mut h = tokens.clone();
    let mut maps = Vec::new();
    for (i, (layer, (k, v))) in layers.iter().zip(&memory.kv).enumerate() {
        h = residual(scope, &h, &layer.ln_self, config.dropout, |n| {
            let (out, m) = multi_head_attention(scope, &layer.self_attn, n, n, Some(self_mask), config, i)?;
            maps.extend(m);
            Ok(out)
        })?;
        h = residual(scope, &h, &layer.ln_cross, config.dropout, |n| {
            let (out, m) = attend_memory(scope, &layer.cross_attn, n, k, v, None, config, i)?;
            maps.extend(m);
            Ok(out)
        })?;
        h = residual(scope, &h, &layer.ln_ffn, config.dropout, |n| layer.ffn.forward(scope, n))?;
    }
    Ok((h, maps))
}
