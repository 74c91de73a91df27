//! Differentiable operations.
//!
//! Broadcasting is limited to [`Tensor::add_bias`] (a vector added along the
//! last axis); every other shape disagreement is an error.

use rand::Rng;

use super::tensor::{numel, Tensor};
use crate::error::{Result, SluError};

pub(crate) enum Op {
    MatMul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    Add { a: Tensor, b: Tensor },
    AddBias { x: Tensor, bias: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, factor: f64 },
    Softmax { x: Tensor, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Tensor },
    Dropout { x: Tensor, mask: Vec<f64> },
    Concat { parts: Vec<Tensor>, outer: usize, inner: usize, lens: Vec<usize> },
    Slice { x: Tensor, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Embedding { table: Tensor, ids: Vec<usize>, dim: usize },
    Reshape { x: Tensor },
    Transpose { x: Tensor, rows: usize, cols: usize },
    Sum { x: Tensor },
    CrossEntropy { logits: Tensor, dlogits: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x, .. }
            | Op::Sum { x } => vec![x],
        }
    }

    pub(crate) fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }

    /// Gradients for each input that requires grad, given the upstream gradient.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut grads = Vec::new();
        let mut push = |t: &Tensor, f: &dyn Fn() -> Vec<f64>| {
            if t.requires_grad() {
                grads.push((t.clone(), f()));
            }
        };
        match self {
            Op::MatMul { a, b, m, k, n } => {
                push(a, &|| {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, b.data(), &mut da, *m, *n, *k);
                    da
                });
                push(b, &|| {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(a.data(), g, &mut db, *m, *k, *n);
                    db
                });
            }
            Op::Add { a, b } => {
                push(a, &|| g.to_vec());
                push(b, &|| g.to_vec());
            }
            Op::AddBias { x, bias } => {
                push(x, &|| g.to_vec());
                push(bias, &|| {
                    let n = bias.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
            }
            Op::Mul { a, b } => {
                push(a, &|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                push(b, &|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            }
            Op::Scale { x, factor } => push(x, &|| g.iter().map(|v| v * factor).collect()),
            Op::Softmax { x, outer, len, inner } => push(x, &|| {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                dx
            }),
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = gain.numel();
                push(x, &|| {
                    let gn = gain.data();
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, s) in inv_std.iter().enumerate() {
                        let rows = r * n..(r + 1) * n;
                        let (gr, xr) = (&g[rows.clone()], &xhat[rows.clone()]);
                        let dxhat: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] =
                                s / n as f64 * (n as f64 * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    dx
                });
                push(gain, &|| {
                    let mut dg = vec![0.0; n];
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    dg
                });
                push(bias, &|| {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks_exact(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    db
                });
            }
            Op::Gelu { x } => push(x, &|| {
                x.data().iter().zip(g).map(|(&v, &g)| g * gelu_grad(v)).collect()
            }),
            Op::Dropout { x, mask } => push(x, &|| g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Concat { parts, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    let off = offset;
                    push(p, &|| {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + off) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        dp
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, inner, axis_len, start, len } => push(x, &|| {
                let mut dx = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                dx
            }),
            Op::Embedding { table, ids, dim } => push(table, &|| {
                let mut dt = vec![0.0; table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..*dim {
                        dt[id * dim + j] += g[row * dim + j];
                    }
                }
                dt
            }),
            Op::Reshape { x } => push(x, &|| g.to_vec()),
            Op::Transpose { x, rows, cols } => push(x, &|| transpose_data(g, *cols, *rows)),
            Op::Sum { x } => push(x, &|| vec![g[0]; x.numel()]),
            Op::CrossEntropy { logits, dlogits } => {
                push(logits, &|| dlogits.iter().map(|d| d * g[0]).collect())
            }
        }
        grads
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(SluError::invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SluError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let shape_err = || SluError::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (m, k) = self.dims2().map_err(|_| shape_err())?;
        let (k2, n) = other.dims2().map_err(|_| shape_err())?;
        if k != k2 {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(), other.data(), &mut out, m, k, n);
        let op = Op::MatMul { a: self.clone(), b: other.clone(), m, k, n };
        Ok(Tensor::from_op(out, vec![m, n], op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add { a: self.clone(), b: other.clone() }))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let last = *self.shape().last().unwrap_or(&0);
        if bias.rank() != 1 || bias.numel() != last {
            return Err(SluError::Shape {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut out = self.data().to_vec();
        for row in out.chunks_exact_mut(last) {
            for (o, v) in row.iter_mut().zip(b) {
                *o += v;
            }
        }
        let op = Op::AddBias { x: self.clone(), bias: bias.clone() };
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul { a: self.clone(), b: other.clone() }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale { x: self.clone(), factor })
    }

    /// Softmax along `axis`, computed with max subtraction. Entries equal to
    /// `-inf` receive exactly zero weight.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(SluError::invalid("softmax over a slice with no finite entry"));
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let op = Op::Softmax { x: self.clone(), outer, len, inner };
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) {
            return Err(SluError::invalid("layer_norm eps must be positive"));
        }
        let n = *self.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(SluError::invalid("layer_norm over a zero-length axis"));
        }
        for p in [gain, bias] {
            if p.rank() != 1 || p.numel() != n {
                return Err(SluError::Shape {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / n;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (gn, bs) = (gain.data(), bias.data());
        for (r, row) in self.data().chunks_exact(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gn[j] + bs[j];
            }
        }
        let op = Op::LayerNorm {
            x: self.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            inv_std,
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| gelu(v)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Gelu { x: self.clone() })
    }

    /// Inverted dropout. In eval mode (`train == false`) or with `p == 0` this
    /// is the identity and returns the input handle unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(SluError::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Dropout { x: self.clone(), mask }))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| SluError::invalid("concat of zero tensors"))?;
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(SluError::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lens.push(p.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let base = o * len * inner;
                out.extend_from_slice(&p.data()[base..base + len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let op = Op::Concat { parts: parts.to_vec(), outer, inner, lens };
        Ok(Tensor::from_op(out, shape, op))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, axis_len, inner) = split_axis(self.shape(), axis)?;
        if len == 0 || start + len > axis_len {
            return Err(SluError::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let op = Op::Slice { x: self.clone(), outer, inner, axis_len, start, len };
        Ok(Tensor::from_op(out, shape, op))
    }

    /// Rows of a `[V×d]` table selected by `ids`, giving `[ids.len()×d]`.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = table.dims2()?;
        if ids.is_empty() {
            return Err(SluError::invalid("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(SluError::TokenOutOfRange { id, size: vocab });
            }
            out.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
        }
        let op = Op::Embedding { table: table.clone(), ids: ids.to_vec(), dim };
        Ok(Tensor::from_op(out, vec![ids.len(), dim], op))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(SluError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape { x: self.clone() }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let out = transpose_data(self.data(), rows, cols);
        Ok(Tensor::from_op(out, vec![cols, rows], Op::Transpose { x: self.clone(), rows, cols }))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum { x: self.clone() })
    }

    /// Label-smoothed cross-entropy over the rows of `[L×V]` logits.
    ///
    /// The smoothed target puts `1 − ε` on the gold id and `ε/(V−1)` on every
    /// other id; the loss is the mean KL divergence from that distribution to
    /// the predicted softmax over positions whose target is not `ignore`.
    /// With `ε = 0` this is ordinary cross-entropy.
    pub fn cross_entropy(&self, targets: &[usize], smoothing: f64, ignore: Option<usize>) -> Result<Tensor> {
        let (rows, vocab) = self.dims2()?;
        if targets.len() != rows {
            return Err(SluError::Shape {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(SluError::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if smoothing > 0.0 && vocab < 2 {
            return Err(SluError::invalid("label smoothing needs at least two classes"));
        }
        let active: Vec<usize> = (0..rows).filter(|&r| Some(targets[r]) != ignore).collect();
        for &r in &active {
            if targets[r] >= vocab {
                return Err(SluError::TokenOutOfRange { id: targets[r], size: vocab });
            }
        }
        if active.is_empty() {
            return Err(SluError::invalid("cross_entropy with every position ignored"));
        }
        let on = 1.0 - smoothing;
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let xlogx = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
        let neg_entropy = xlogx(on) + (vocab - 1) as f64 * xlogx(off);
        let norm = 1.0 / active.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows * vocab];
        for &r in &active {
            let row = &self.data()[r * vocab..(r + 1) * vocab];
            let logp = log_softmax(row);
            let t = targets[r];
            let cross: f64 = logp
                .iter()
                .enumerate()
                .map(|(j, lp)| if j == t { on * lp } else { off * lp })
                .sum();
            loss += neg_entropy - cross;
            for (j, lp) in logp.iter().enumerate() {
                let q = if j == t { on } else { off };
                dlogits[r * vocab + j] = (lp.exp() - q) * norm;
            }
        }
        let op = Op::CrossEntropy { logits: self.clone(), dlogits };
        Ok(Tensor::from_op(vec![loss * norm], vec![1], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (f(&t(&xp, shape)) - f(&t(&xm, shape))) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences.
    fn check_unary(shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor, tol: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = numel(shape);
        let x0 = random_vec(&mut rng, n);
        let out_shape = f(&t(&x0, shape)).shape().to_vec();
        let w = t(&random_vec(&mut rng, numel(&out_shape)), &out_shape);
        let probe = |x: &Tensor| f(x).mul(&w).unwrap().sum().item().unwrap();
        let x = Tensor::variable(x0.clone(), shape).unwrap();
        f(&x).mul(&w).unwrap().sum().backward().unwrap();
        let num = numeric_grad(&x0, shape, &probe);
        let err = rel_err(&x.grad().unwrap(), &num);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn matmul_identity_and_projector() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
        let p = t(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(p.matmul(&b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_vec(&mut rng, 12);
        let b = random_vec(&mut rng, 8);
        let got = t(&a, &[3, 4]).matmul(&t(&b, &[4, 2])).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b, 3, 4, 2)) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 6], &[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b0 = random_vec(&mut rng, 8);
        let b = t(&b0, &[4, 2]);
        check_unary(&[3, 4], &|x| x.matmul(&b).unwrap(), 1e-6, 1);
        let a = t(&random_vec(&mut rng, 12), &[3, 4]);
        check_unary(&[4, 2], &|x| a.matmul(x).unwrap(), 1e-6, 2);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_gradient_both_axes() {
        check_unary(&[3, 4], &|x| x.softmax(1).unwrap(), 1e-6, 11);
        check_unary(&[3, 4], &|x| x.softmax(0).unwrap(), 1e-6, 12);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let s = t(&[0.3, f64::NEG_INFINITY, -1.0], &[1, 3]).softmax(1).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_and_bias_shift() {
        let ones = t(&[1.0; 4], &[4]);
        let zeros = t(&[0.0; 4], &[4]);
        let y = t(&[2.5; 4], &[1, 4]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let b = t(&[0.7; 4], &[4]);
        let y = t(&[1.0, 3.0, -2.0, 0.5], &[1, 4]).layer_norm(&ones, &b, 1e-5).unwrap();
        let mean = y.data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let ones = t(&[1.0; 5], &[5]);
        let zeros = t(&[0.0; 5], &[5]);
        let y = t(&[1.0, 3.0, -2.0, 0.5, 9.0, 0.1, 0.2, 0.3, 0.4, -7.0], &[2, 5])
            .layer_norm(&ones, &zeros, 1e-12)
            .unwrap();
        for row in y.data().chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g0 = random_vec(&mut rng, 4);
        let b0 = random_vec(&mut rng, 4);
        let (g, b) = (t(&g0, &[4]), t(&b0, &[4]));
        check_unary(&[3, 4], &|x| x.layer_norm(&g, &b, 1e-5).unwrap(), 1e-5, 22);
        let x = t(&random_vec(&mut rng, 12), &[3, 4]);
        check_unary(&[4], &|gain| x.layer_norm(gain, &b, 1e-5).unwrap(), 1e-5, 23);
        check_unary(&[4], &|bias| x.layer_norm(&g, bias, 1e-5).unwrap(), 1e-5, 24);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let ones = t(&[1.0; 2], &[2]);
        assert!(t(&[1.0, 2.0], &[1, 2]).layer_norm(&ones, &ones, 0.0).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let other = t(&random_vec(&mut rng, 6), &[2, 3]);
        let bias = t(&random_vec(&mut rng, 3), &[3]);
        check_unary(&[2, 3], &|x| x.add(&other).unwrap(), 1e-4, 32);
        check_unary(&[2, 3], &|x| x.mul(&other).unwrap(), 1e-4, 33);
        check_unary(&[2, 3], &|x| x.gelu(), 1e-4, 34);
        check_unary(&[2, 3], &|x| x.scale(-1.7), 1e-4, 35);
        check_unary(&[2, 3], &|x| x.add_bias(&bias).unwrap(), 1e-4, 36);
        let base = t(&random_vec(&mut rng, 6), &[2, 3]);
        check_unary(&[3], &|b| base.add_bias(b).unwrap(), 1e-4, 37);
        check_unary(&[2, 3], &|x| x.transpose().unwrap(), 1e-4, 38);
        check_unary(&[2, 3], &|x| x.reshape(&[3, 2]).unwrap(), 1e-4, 39);
        check_unary(&[2, 5], &|x| x.slice(1, 1, 3).unwrap(), 1e-4, 40);
        check_unary(&[4, 2], &|x| x.slice(0, 2, 2).unwrap(), 1e-4, 41);
        let right = t(&random_vec(&mut rng, 4), &[2, 2]);
        check_unary(&[2, 3], &|x| Tensor::concat(&[x.clone(), right.clone()], 1).unwrap(), 1e-4, 42);
        check_unary(&[5, 2], &|table| Tensor::embedding(table, &[4, 0, 4, 2]).unwrap(), 1e-4, 43);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[1.0; 1000], &[1000]);
        let y = x.dropout(0.3, false, &mut rng).unwrap();
        assert!(y.same_node(&x));
        let y = x.dropout(0.5, true, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        check_unary(
            &[2, 3],
            &|x| x.dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap(),
            1e-6,
            44,
        );
    }

    #[test]
    fn concat_then_slices_is_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0, 9.0, 10.0], &[2, 3]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 2, 3).unwrap().data(), b.data());
        assert!(Tensor::concat(&[a, t(&[1.0; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = t(&[0.0; 6], &[3, 2]);
        assert!(matches!(
            Tensor::embedding(&table, &[3]),
            Err(SluError::TokenOutOfRange { id: 3, size: 3 })
        ));
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let logits = t(&[50.0, 0.0, 0.0, 0.0], &[1, 4]);
        let l = logits.cross_entropy(&[0], 0.0, None).unwrap().item().unwrap();
        assert!(l < 1e-20);
        let l = t(&[0.0; 5], &[1, 5]).cross_entropy(&[3], 0.0, None).unwrap().item().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_smoothed_matches_direct_sum() {
        let z = [0.3, -1.2, 2.0, 0.5];
        let eps = 0.1;
        let target = 2;
        // KL(q || p) written out term by term.
        let lse = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let mut want = 0.0;
        for (j, zj) in z.iter().enumerate() {
            let q: f64 = if j == target { 1.0 - eps } else { eps / 3.0 };
            let p = (zj - lse).exp();
            want += q * (q / p).ln();
        }
        let got = t(&z, &[1, 4]).cross_entropy(&[target], eps, None).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn cross_entropy_ignores_and_validates() {
        let logits = t(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[2, 3]);
        let both = logits.cross_entropy(&[1, 0], 0.0, Some(0)).unwrap().item().unwrap();
        let single = t(&[0.1, 0.2, 0.3], &[1, 3]).cross_entropy(&[1], 0.0, None).unwrap();
        assert!((both - single.item().unwrap()).abs() < 1e-15);
        assert!(matches!(
            logits.cross_entropy(&[1, 7], 0.0, None),
            Err(SluError::TokenOutOfRange { id: 7, .. })
        ));
        assert!(logits.cross_entropy(&[1, 1], 1.0, None).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x0 = random_vec(&mut rng, 12);
        let f = |x: &Tensor| x.cross_entropy(&[1, 3, 0], 0.1, Some(3)).unwrap().item().unwrap();
        let x = Tensor::variable(x0.clone(), &[3, 4]).unwrap();
        x.cross_entropy(&[1, 3, 0], 0.1, Some(3)).unwrap().backward().unwrap();
        let err = rel_err(&x.grad().unwrap(), &numeric_grad(&x0, &[3, 4], &f));
        assert!(err < 1e-6, "{err}");
    }
}
