//! Binary checkpoint format.
//!
//! ```text
//! magic "DSLUCKPT" | u32 version | u64 meta length | meta JSON
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims…, f64 values…
//! sha-256 of everything above
//! ```
//!
//! Optimizer moments are stored as extra tensors named `opt.m1/<param>` and
//! `opt.m2/<param>`. All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::two_pass::{ModelConfig, StageFlags, TwoPassModel};
use super::vocab::Vocabulary;
use crate::autodiff::{AdamConfig, Moments, OptimizerState};
use crate::error::{Result, SluError};

const MAGIC: &[u8; 8] = b"DSLUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const M1: &str = "opt.m1/";
const M2: &str = "opt.m2/";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vocabulary,
    stages: StageFlags,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend((*d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend(v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(model: &TwoPassModel, optimizer: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let meta = Meta {
        config: model.config,
        vocab: model.vocab.clone(),
        stages: model.stages,
        optimizer: optimizer.map(|o| OptimizerMeta { config: o.config, step: o.step }),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend((meta.len() as u64).to_le_bytes());
    buf.extend(&meta);
    let moments = optimizer.map(|o| &o.moments);
    let n = model.store.len() + 2 * moments.map_or(0, BTreeMap::len);
    buf.extend((n as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        put_tensor(&mut buf, &p.name, &p.shape, &p.value);
    }
    for (name, m) in moments.into_iter().flatten() {
        put_tensor(&mut buf, &format!("{M1}{name}"), &[m.first.len()], &m.first);
        put_tensor(&mut buf, &format!("{M2}{name}"), &[m.second.len()], &m.second);
    }
    let digest = Sha256::digest(&buf);
    buf.extend(digest);
    Ok(buf)
}

pub fn save_checkpoint(model: &TwoPassModel, optimizer: Option<&OptimizerState>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, optimizer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SluError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| SluError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SluError::Integrity(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| SluError::Integrity("length overflows".into()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TwoPassModel, Option<OptimizerState>)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(SluError::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(SluError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 12 + 32 {
        return Err(SluError::Integrity("file is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(SluError::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let meta_len = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = TwoPassModel::new(meta.config, meta.vocab, 0)?;
    model.stages = meta.stages;
    let mut optimizer = meta.optimizer.map(|o| OptimizerState { config: o.config, step: o.step, moments: BTreeMap::new() });
    let n = r.u32()? as usize;
    let mut loaded = vec![false; model.store.len()];
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SluError::Integrity("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| SluError::Integrity("tensor too large".into()))?)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(param) = name.strip_prefix(M1).or_else(|| name.strip_prefix(M2)) {
            let opt = optimizer.as_mut().ok_or_else(|| SluError::Integrity("moments without optimizer state".into()))?;
            let m = opt
                .moments
                .entry(param.to_owned())
                .or_insert_with(|| Moments { first: Vec::new(), second: Vec::new() });
            if name.starts_with(M1) {
                m.first = values;
            } else {
                m.second = values;
            }
            continue;
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| SluError::Integrity(format!("unknown tensor `{name}`")))?;
        if model.store.get(id).shape != shape {
            return Err(SluError::Shape { op: "load_checkpoint", lhs: model.store.get(id).shape.clone(), rhs: shape });
        }
        model.store.set_value(id, values)?;
        loaded[id.0] = true;
    }
    if r.pos != body.len() {
        return Err(SluError::Integrity("trailing bytes after tensors".into()));
    }
    if let Some(i) = loaded.iter().position(|l| !l) {
        let name = &model.param_names()[i];
        return Err(SluError::Integrity(format!("checkpoint lacks tensor `{name}`")));
    }
    Ok((model, optimizer))
}

pub fn load_checkpoint(path: &Path) -> Result<(TwoPassModel, Option<OptimizerState>)> {
    let bytes = fs::read(path).map_err(|e| SluError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
