use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SluError};
use crate::rng::substream;

/// Frobenius norm of the gain perturbation `E` in `I + E`. Keeps every
/// singular value of the gain within `1 ± 0.5`.
const GAIN_PERTURBATION: f64 = 0.5;
const OFFSET_STD: f64 = 0.3;
const RATE_RANGE: (f64, f64) = (0.8, 1.3);

/// Affine voice applied to prototype frames, plus a speaking rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// `feat_dim × feat_dim`, row-major.
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub rate: f64,
}

impl SpeakerProfile {
    pub fn identity(speaker_id: &str, feat_dim: usize) -> Self {
        let mut gain = vec![0.0; feat_dim * feat_dim];
        for i in 0..feat_dim {
            gain[i * feat_dim + i] = 1.0;
        }
        SpeakerProfile { speaker_id: speaker_id.to_owned(), gain, offset: vec![0.0; feat_dim], rate: 1.0 }
    }

    pub fn feat_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn validate(&self, feat_dim: usize) -> Result<()> {
        if self.offset.len() != feat_dim || self.gain.len() != feat_dim * feat_dim {
            return Err(SluError::invalid(format!(
                "speaker {} does not match feature dimension {feat_dim}",
                self.speaker_id
            )));
        }
        if !(self.rate > 0.5 && self.rate < 2.0) {
            return Err(SluError::invalid(format!("speaker {} has rate {}", self.speaker_id, self.rate)));
        }
        Ok(())
    }

    /// `gain · x + offset` into `out`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.feat_dim();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.gain[i * d..(i + 1) * d];
            *o = self.offset[i] + row.iter().zip(x).map(|(g, v)| g * v).sum::<f64>();
        }
    }
}

pub fn generate_speakers(seed: u64, n: usize, feat_dim: usize) -> Vec<SpeakerProfile> {
    let mut rng = substream(seed, "speakers");
    (0..n)
        .map(|k| {
            let d = feat_dim;
            let e: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut gain: Vec<f64> = e.iter().map(|v| v * GAIN_PERTURBATION / norm).collect();
            for i in 0..d {
                gain[i * d + i] += 1.0;
            }
            let offset = (0..d).map(|_| OFFSET_STD * rng.sample::<f64, _>(StandardNormal)).collect();
            let rate = rng.random_range(RATE_RANGE.0..RATE_RANGE.1);
            SpeakerProfile { speaker_id: format!("spk{k:03}"), gain, offset, rate }
        })
        .collect()
}
