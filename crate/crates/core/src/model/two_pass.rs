use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, MASK, PAD};
use crate::autodiff::{ParamId, ParamSet, ParamStore, Scope, Tensor};
use crate::corpus::FRAME_PERIOD;
use crate::error::{Result, SluError};
use crate::nn::{
    add_positions, causal_mask, decoder_forward_memory, encoder_forward, AttentionConfig, AttentionMap,
    DecoderLayer, EncoderLayer, LayerNorm, Linear, Memory,
};
use crate::rng::substream;

/// Parameter-name prefixes of the model components.
pub mod prefix {
    pub const ACOUSTIC: &str = "aco.";
    pub const PASS1: &str = "dec1.";
    pub const SEMANTIC: &str = "sem.";
    pub const PROJECTION: &str = "proj.";
    pub const DELIBERATION: &str = "del.";
    pub const PASS2: &str = "dec2.";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub pass1_layers: usize,
    /// Semantic encoder width `o`.
    pub sem_dim: usize,
    pub sem_heads: usize,
    pub sem_ffn_dim: usize,
    pub sem_layers: usize,
    pub deliberation_layers: usize,
    /// When false, deliberation self-attention only lets acoustic positions
    /// see acoustic positions and semantic positions see semantic positions.
    pub deliberation_full_attention: bool,
    pub pass2_layers: usize,
    pub subsample: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            pass1_layers: 2,
            sem_dim: 32,
            sem_heads: 4,
            sem_ffn_dim: 64,
            sem_layers: 2,
            deliberation_layers: 2,
            deliberation_full_attention: true,
            pass2_layers: 2,
            subsample: 8,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.d_model, self.n_heads, self.dropout)?;
        AttentionConfig::new(self.sem_dim, self.sem_heads, self.dropout)?;
        if self.feat_dim == 0 || self.ffn_dim == 0 || self.sem_ffn_dim == 0 || self.subsample == 0 {
            return Err(SluError::invalid("model dimensions and subsampling factor must be positive"));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, n_heads: self.n_heads, dropout: self.dropout }
    }

    pub fn sem_attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.sem_dim, n_heads: self.sem_heads, dropout: self.dropout }
    }
}

/// Which training stages a model has been through.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub pretrained_lm: bool,
    pub stage1: bool,
    pub stage2: bool,
}

#[derive(Debug, Clone)]
struct Decoder {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Components {
    aco_sub: Linear,
    aco_layers: Vec<EncoderLayer>,
    aco_norm: LayerNorm,
    pass1: Decoder,
    sem_embed: ParamId,
    sem_layers: Vec<EncoderLayer>,
    sem_norm: LayerNorm,
    sem_mlm: Linear,
    projection: Linear,
    del_layers: Vec<EncoderLayer>,
    del_norm: LayerNorm,
    pass2: Decoder,
}

/// `c_aco`: encoded (possibly truncated) audio.
#[derive(Debug, Clone)]
pub struct AcousticEmbedding {
    pub tensor: Tensor,
    /// Seconds of audio that were encoded.
    pub source_seconds: f64,
    pub maps: Vec<AttentionMap>,
}

impl AcousticEmbedding {
    pub fn len(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw semantic encoder output and its projection to model width.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    pub raw: Tensor,
    pub projected: Tensor,
}

/// Precomputed cross-attention memory for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    memory: Memory,
    pass: Pass,
}

impl DecoderContext {
    pub fn len(&self) -> usize {
        self.memory.len
    }

    pub fn is_empty(&self) -> bool {
        self.memory.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    First,
    Second,
}

/// Every component of the two-pass system plus its vocabulary.
#[derive(Debug, Clone)]
pub struct TwoPassModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub stages: StageFlags,
    parts: Components,
}

fn embedding_table(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    store.add(name, &[rows, dim], (0..rows * dim).map(|_| normal.sample(rng)).collect())
}

fn encoder_stack(
    store: &mut ParamStore,
    name: &str,
    n: usize,
    d: usize,
    ffn: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncoderLayer>> {
    (0..n).map(|i| EncoderLayer::new(store, &format!("{name}{i}"), d, ffn, rng)).collect()
}

fn decoder(store: &mut ParamStore, name: &str, cfg: &ModelConfig, n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Result<Decoder> {
    let d = cfg.d_model;
    Ok(Decoder {
        embed: embedding_table(store, &format!("{name}emb"), vocab, d, rng)?,
        layers: (0..n)
            .map(|i| DecoderLayer::new(store, &format!("{name}l{i}"), d, cfg.ffn_dim, rng))
            .collect::<Result<_>>()?,
        norm: LayerNorm::new(store, &format!("{name}ln"), d)?,
        head: Linear::zeros(store, &format!("{name}out"), d, vocab)?,
    })
}

impl TwoPassModel {
    /// Fresh model; parameters are drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let v = vocab.size();
        let (d, o) = (config.d_model, config.sem_dim);
        let s = &mut store;
        let r = &mut rng;
        let parts = Components {
            aco_sub: Linear::new(s, "aco.sub", config.feat_dim * config.subsample, d, true, r)?,
            aco_layers: encoder_stack(s, "aco.l", config.encoder_layers, d, config.ffn_dim, r)?,
            aco_norm: LayerNorm::new(s, "aco.ln", d)?,
            pass1: decoder(s, prefix::PASS1, &config, config.pass1_layers, v, r)?,
            sem_embed: embedding_table(s, "sem.emb", v, o, r)?,
            sem_layers: encoder_stack(s, "sem.l", config.sem_layers, o, config.sem_ffn_dim, r)?,
            sem_norm: LayerNorm::new(s, "sem.ln", o)?,
            sem_mlm: Linear::zeros(s, "sem.mlm", o, v)?,
            projection: Linear::new(s, "proj.m", o, d, false, r)?,
            del_layers: encoder_stack(s, "del.l", config.deliberation_layers, d, config.ffn_dim, r)?,
            del_norm: LayerNorm::new(s, "del.ln", d)?,
            pass2: decoder(s, prefix::PASS2, &config, config.pass2_layers, v, r)?,
        };
        Ok(TwoPassModel { config, vocab, store, stages: StageFlags::default(), parts })
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn params(&self, prefixes: &[&str]) -> ParamSet {
        self.store.select(prefixes)
    }

    /// Acoustic-encoder parameters as seen by the first pass.
    pub fn pass1_acoustic_params(&self) -> Vec<ParamId> {
        self.params(&[prefix::ACOUSTIC]).iter().collect()
    }

    /// Acoustic-encoder parameters as seen by the second pass; the same set.
    pub fn pass2_acoustic_params(&self) -> Vec<ParamId> {
        self.params(&[prefix::ACOUSTIC]).iter().collect()
    }

    pub fn projection_param(&self) -> ParamId {
        self.parts.projection.weight
    }

    /// Frames actually consumed for a prefix of `prefix_seconds`.
    pub fn prefix_frame_count(n_frames: usize, prefix_seconds: Option<f64>) -> Result<usize> {
        match prefix_seconds {
            None => Ok(n_frames),
            Some(s) if s == f64::INFINITY => Ok(n_frames),
            Some(s) if s > 0.0 => {
                let n = (s / FRAME_PERIOD + 1e-9).floor() as usize;
                Ok(n.clamp(1, n_frames))
            }
            Some(s) => Err(SluError::invalid(format!("prefix length must be positive, got {s}"))),
        }
    }

    /// Encodes `frames` (`n_frames × feat_dim`, row-major), optionally only the
    /// first `prefix_seconds` of them.
    pub fn encode_acoustic(&self, scope: &Scope, frames: &[f64], prefix_seconds: Option<f64>) -> Result<AcousticEmbedding> {
        let f = self.config.feat_dim;
        if frames.is_empty() || frames.len() % f != 0 {
            return Err(SluError::invalid(format!(
                "expected a non-empty frame matrix with {f} columns, got {} values",
                frames.len()
            )));
        }
        let t = Self::prefix_frame_count(frames.len() / f, prefix_seconds)?;
        let x = Tensor::new(frames[..t * f].to_vec(), &[t, f])?;
        self.encode_acoustic_tensor(scope, &x, t as f64 * FRAME_PERIOD)
    }

    /// Encodes an already truncated (and possibly augmented) frame tensor.
    pub fn encode_acoustic_tensor(&self, scope: &Scope, x: &Tensor, source_seconds: f64) -> Result<AcousticEmbedding> {
        let (t, f) = x.dims2()?;
        let factor = self.config.subsample;
        // Fewer frames than one subsampling window still yield one step.
        let x = if t < factor { Tensor::concat(&[x.clone(), Tensor::zeros(&[factor - t, f])?], 0)? } else { x.clone() };
        let h = crate::nn::subsample(scope, &self.parts.aco_sub, &x, factor)?;
        let h = scope.dropout(&add_positions(&h)?, self.config.dropout)?;
        let (h, maps) = encoder_forward(scope, &self.parts.aco_layers, &h, None, &self.config.attention())?;
        let tensor = self.parts.aco_norm.forward(scope, &h)?;
        Ok(AcousticEmbedding { tensor, source_seconds, maps })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return Err(SluError::invalid("target prefix must start with BOS"));
        }
        for &id in prefix {
            self.vocab.kind(id)?;
        }
        Ok(())
    }

    pub fn decoder_context(&self, scope: &Scope, pass: Pass, context: &Tensor) -> Result<DecoderContext> {
        let dec = self.decoder(pass);
        Ok(DecoderContext { memory: Memory::new(scope, &dec.layers, context)?, pass })
    }

    fn decoder(&self, pass: Pass) -> &Decoder {
        match pass {
            Pass::First => &self.parts.pass1,
            Pass::Second => &self.parts.pass2,
        }
    }

    /// Logits `[L × |V|]`; row `l` scores the token after `prefix[..=l]`.
    pub fn decoder_logits(&self, scope: &Scope, ctx: &DecoderContext, prefix: &[usize]) -> Result<(Tensor, Vec<AttentionMap>)> {
        self.check_prefix(prefix)?;
        let dec = self.decoder(ctx.pass);
        let emb = Tensor::embedding(&scope.param(dec.embed), prefix)?;
        let h = scope.dropout(&add_positions(&emb)?, self.config.dropout)?;
        let mask = causal_mask(prefix.len());
        let (h, maps) = decoder_forward_memory(scope, &dec.layers, &h, &ctx.memory, Some(&mask), &self.config.attention())?;
        let h = dec.norm.forward(scope, &h)?;
        Ok((dec.head.forward(scope, &h)?, maps))
    }

    pub fn first_pass_logits(&self, scope: &Scope, c_aco: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let ctx = self.decoder_context(scope, Pass::First, c_aco)?;
        Ok(self.decoder_logits(scope, &ctx, prefix)?.0)
    }

    pub fn second_pass_logits(&self, scope: &Scope, c_del: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let ctx = self.decoder_context(scope, Pass::Second, c_del)?;
        Ok(self.decoder_logits(scope, &ctx, prefix)?.0)
    }

    fn check_semantic_input(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(SluError::invalid("semantic encoder input is empty"));
        }
        for &id in tokens {
            if !(self.vocab.is_word(id) || id == PAD || id == MASK) {
                self.vocab.kind(id)?;
                return Err(SluError::invalid(format!("token {id} is not a word and cannot be encoded as text")));
            }
        }
        Ok(())
    }

    /// Semantic encoder output before projection, `[T̂ × o]`.
    pub fn encode_semantic_raw(&self, scope: &Scope, tokens: &[usize]) -> Result<Tensor> {
        self.check_semantic_input(tokens)?;
        let emb = Tensor::embedding(&scope.param(self.parts.sem_embed), tokens)?;
        let h = scope.dropout(&add_positions(&emb)?, self.config.dropout)?;
        let (h, _) = encoder_forward(scope, &self.parts.sem_layers, &h, None, &self.config.sem_attention())?;
        self.parts.sem_norm.forward(scope, &h)
    }

    /// Masked-token prediction logits over the vocabulary, used for pretraining.
    pub fn mlm_logits(&self, scope: &Scope, raw: &Tensor) -> Result<Tensor> {
        self.parts.sem_mlm.forward(scope, raw)
    }

    pub fn project_semantic(&self, scope: &Scope, raw: &Tensor) -> Result<Tensor> {
        self.parts.projection.forward(scope, raw)
    }

    pub fn encode_semantic(&self, scope: &Scope, tokens: &[usize]) -> Result<SemanticEmbedding> {
        let raw = self.encode_semantic_raw(scope, tokens)?;
        let projected = self.project_semantic(scope, &raw)?;
        Ok(SemanticEmbedding { raw, projected })
    }

    /// Semantic input for a decoded transcript; an empty one becomes `[PAD]`.
    pub fn semantic_input(transcript: &[usize]) -> Vec<usize> {
        if transcript.is_empty() {
            vec![PAD]
        } else {
            transcript.to_vec()
        }
    }

    /// `c_del = ENC_del(c_aco ‖ c_sem)`, length `T′ + T̂`.
    pub fn deliberate(&self, scope: &Scope, c_aco: &Tensor, c_sem: &Tensor) -> Result<(Tensor, Vec<AttentionMap>)> {
        let (ta, da) = c_aco.dims2()?;
        let (ts, ds) = c_sem.dims2()?;
        if da != self.config.d_model || ds != self.config.d_model {
            return Err(SluError::Shape { op: "deliberate", lhs: c_aco.shape().to_vec(), rhs: c_sem.shape().to_vec() });
        }
        let joint = Tensor::concat(&[c_aco.clone(), c_sem.clone()], 0)?;
        let mask = (!self.config.deliberation_full_attention).then(|| {
            let n = ta + ts;
            let mut m = crate::nn::Mask::full(n, n);
            for i in 0..n {
                for j in 0..n {
                    m.allow[i * n + j] = (i < ta) == (j < ta);
                }
            }
            m
        });
        let (h, maps) = encoder_forward(scope, &self.parts.del_layers, &joint, mask.as_ref(), &self.config.attention())?;
        Ok((self.parts.del_norm.forward(scope, &h)?, maps))
    }

    /// Names of every parameter, in creation order.
    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// SHA-256 over every parameter's name, shape and bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
