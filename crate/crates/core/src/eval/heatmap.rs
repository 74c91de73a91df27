use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Scope;
use crate::error::{Result, SluError};
use crate::model::TwoPassModel;

/// One head of the first deliberation layer over `c_aco ‖ c_sem`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub layer: usize,
    pub head: usize,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    /// First semantic column; equals the acoustic length.
    pub boundary: usize,
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub acoustic_mass: Vec<f64>,
    pub semantic_mass: Vec<f64>,
}

impl HeatmapMatrix {
    pub fn rows(&self) -> usize {
        self.query_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.key_labels.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols()..(r + 1) * self.cols()]
    }

    /// Mass each query row puts on key column `c`.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.row(r)[c]).collect()
    }

    /// Header of key labels, then one row per query with its label first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for k in &self.key_labels {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for (r, q) in self.query_labels.iter().enumerate() {
            out.push_str(q);
            for v in self.row(r) {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Labels the acoustic steps by the frame span they summarize and the
/// semantic positions by their words.
pub fn heatmap_labels(model: &TwoPassModel, n_steps: usize, transcript: &[usize]) -> Result<Vec<String>> {
    let f = model.config.subsample;
    let mut labels: Vec<String> = (0..n_steps).map(|k| format!("f{}-{}", k * f, (k + 1) * f - 1)).collect();
    for &t in &TwoPassModel::semantic_input(transcript) {
        labels.push(model.vocab.token_str(t)?.to_owned());
    }
    Ok(labels)
}

/// First-layer deliberation attention for one utterance and transcript.
pub fn export_heatmaps(model: &TwoPassModel, frames: &[f64], transcript: &[usize]) -> Result<Vec<HeatmapMatrix>> {
    let scope = Scope::eval(&model.store);
    let c_aco = model.encode_acoustic(&scope, frames, None)?;
    let sem = model.encode_semantic(&scope, &TwoPassModel::semantic_input(transcript))?;
    let (_, maps) = model.deliberate(&scope, &c_aco.tensor, &sem.projected)?;
    let boundary = c_aco.len();
    let labels = heatmap_labels(model, boundary, transcript)?;
    maps.into_iter()
        .filter(|m| m.layer == 0)
        .map(|m| {
            if m.cols != labels.len() || m.rows != labels.len() {
                return Err(SluError::Shape { op: "export_heatmaps", lhs: vec![m.rows, m.cols], rhs: vec![labels.len()] });
            }
            Ok(HeatmapMatrix {
                layer: m.layer,
                head: m.head,
                query_labels: labels.clone(),
                key_labels: labels.clone(),
                boundary,
                acoustic_mass: m.block_mass(0, boundary),
                semantic_mass: m.block_mass(boundary, m.cols),
                weights: m.weights,
            })
        })
        .collect()
}

/// Writes `heatmap_l{layer}_h{head}.csv` per matrix and a `heatmaps.json`
/// sidecar with labels, boundary and per-row masses.
pub fn write_heatmaps(dir: &Path, maps: &[HeatmapMatrix]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SluError::io(dir, e))?;
    let mut written = Vec::new();
    for m in maps {
        let path = dir.join(format!("heatmap_l{}_h{}.csv", m.layer, m.head));
        fs::write(&path, m.to_csv()).map_err(|e| SluError::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("heatmaps.json");
    fs::write(&path, serde_json::to_string_pretty(maps)?).map_err(|e| SluError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
