use rand::Rng;

use super::config::SpecMaskConfig;
use crate::rng::substream;

/// Zeroes up to `n_time_masks` bands of consecutive frames and up to
/// `n_feat_masks` bands of consecutive feature columns. Each band draws a
/// width uniformly from `0..=max` (clamped to the dimension) and a uniform start.
pub fn apply_spec_mask(frames: &[f64], feat_dim: usize, config: &SpecMaskConfig, seed: u64) -> Vec<f64> {
    let mut out = frames.to_vec();
    if feat_dim == 0 || frames.is_empty() {
        return out;
    }
    let n_frames = frames.len() / feat_dim;
    let mut rng = substream(seed, "specmask");
    let mut band = |dim: usize, max: usize| {
        let w = rng.random_range(0..=max.min(dim));
        let start = rng.random_range(0..=dim - w);
        start..start + w
    };
    let times: Vec<_> = (0..config.n_time_masks).map(|_| band(n_frames, config.max_time_width)).collect();
    let feats: Vec<_> = (0..config.n_feat_masks).map(|_| band(feat_dim, config.max_feat_width)).collect();
    for r in times {
        out[r.start * feat_dim..r.end * feat_dim].fill(0.0);
    }
    for r in feats {
        for t in 0..n_frames {
            out[t * feat_dim + r.start..t * feat_dim + r.end].fill(0.0);
        }
    }
    out
}

/// Probability that index `i` of a length-`dim` axis is covered by one band.
fn cover_probability(dim: usize, max: usize, i: usize) -> f64 {
    let max = max.min(dim);
    let mut p = 0.0;
    for w in 1..=max {
        let starts = dim - w + 1;
        let lo = i.saturating_sub(w - 1);
        let hi = i.min(dim - w);
        p += (hi + 1 - lo) as f64 / starts as f64;
    }
    p / (max + 1) as f64
}

fn axis_coverage(dim: usize, max: usize, n: usize) -> Vec<f64> {
    (0..dim).map(|i| 1.0 - (1.0 - cover_probability(dim, max, i)).powi(n as i32)).collect()
}

/// Expected fraction of cells zeroed for a `n_frames × feat_dim` input.
pub fn expected_masked_fraction(n_frames: usize, feat_dim: usize, config: &SpecMaskConfig) -> f64 {
    if n_frames == 0 || feat_dim == 0 {
        return 0.0;
    }
    let pt = axis_coverage(n_frames, config.max_time_width, config.n_time_masks);
    let pf = axis_coverage(feat_dim, config.max_feat_width, config.n_feat_masks);
    let mut total = 0.0;
    for a in &pt {
        for b in &pf {
            total += 1.0 - (1.0 - a) * (1.0 - b);
        }
    }
    total / (n_frames * feat_dim) as f64
}
