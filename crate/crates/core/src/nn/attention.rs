use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::autodiff::{ParamStore, Scope, Tensor};
use crate::error::{Result, SluError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, dropout: f64) -> Result<Self> {
        let cfg = AttentionConfig { d_model, n_heads, dropout };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(SluError::invalid(format!(
                "{} heads do not divide model dimension {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SluError::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Attention weights of one head, `rows × cols`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    /// Per-row attention mass over columns `start..end`.
    pub fn block_mass(&self, start: usize, end: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r)[start..end].iter().sum()).collect()
    }
}

/// Boolean attention mask; `allow[i * cols + j]` lets query `i` see key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, allow: vec![true; rows * cols] }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    /// Additive form: 0 where allowed, −∞ elsewhere.
    fn additive(&self) -> Result<Tensor> {
        let v = self.allow.iter().map(|&a| if a { 0.0 } else { f64::NEG_INFINITY }).collect();
        Tensor::new(v, &[self.rows, self.cols])
    }
}

/// Query `i` may attend to keys `0..=i`.
pub fn causal_mask(length: usize) -> Mask {
    let mut m = Mask::full(length, length);
    for i in 0..length {
        for j in i + 1..length {
            m.allow[i * length + j] = false;
        }
    }
    m
}

/// Query, key, value and output projections.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
        })
    }

    /// Key and value projections of `kv_input`, reusable across queries.
    pub fn project_memory(&self, scope: &Scope, kv_input: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.k.forward(scope, kv_input)?, self.v.forward(scope, kv_input)?))
    }
}

fn check_dim(x: &Tensor, d: usize) -> Result<usize> {
    let (rows, cols) = x.dims2()?;
    if cols != d {
        return Err(SluError::Shape { op: "attention", lhs: x.shape().to_vec(), rhs: vec![rows, d] });
    }
    Ok(rows)
}

pub fn multi_head_attention(
    scope: &Scope,
    params: &AttentionParams,
    q_input: &Tensor,
    kv_input: &Tensor,
    mask: Option<&Mask>,
    config: &AttentionConfig,
    layer: usize,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    check_dim(kv_input, config.d_model)?;
    let (k, v) = params.project_memory(scope, kv_input)?;
    attend_memory(scope, params, q_input, &k, &v, mask, config, layer)
}

/// Attention against already projected keys and values.
#[allow(clippy::too_many_arguments)]
pub fn attend_memory(
    scope: &Scope,
    params: &AttentionParams,
    q_input: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
    config: &AttentionConfig,
    layer: usize,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let lq = check_dim(q_input, config.d_model)?;
    let lk = check_dim(k, config.d_model)?;
    let additive = match mask {
        Some(m) if m.rows != lq || m.cols != lk => {
            return Err(SluError::Shape { op: "attention mask", lhs: vec![m.rows, m.cols], rhs: vec![lq, lk] })
        }
        Some(m) if m.allow.iter().all(|&a| a) => None,
        Some(m) => Some(m.additive()?),
        None => None,
    };
    let q = params.q.forward(scope, q_input)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let keep_maps = !scope.is_train();
    let mut heads = Vec::with_capacity(config.n_heads);
    let mut maps = Vec::new();
    for h in 0..config.n_heads {
        let (qh, kh, vh) = if config.n_heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?)
        };
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        if let Some(m) = &additive {
            scores = scores.add(m)?;
        }
        let w = scores.softmax(1)?;
        if keep_maps {
            maps.push(AttentionMap { layer, head: h, rows: lq, cols: lk, weights: w.data().to_vec() });
        }
        heads.push(w.matmul(&vh)?);
    }
    let joined = if heads.len() == 1 { heads.pop().expect("one head") } else { Tensor::concat(&heads, 1)? };
    Ok((params.o.forward(scope, &joined)?, maps))
}
