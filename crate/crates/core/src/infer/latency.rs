use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::{RoutedPrediction, Source};
use crate::error::{Result, SluError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub t_pass1: f64,
    pub t_pass2: f64,
    pub t_total: f64,
    pub prefix_seconds: Option<f64>,
    pub processed_seconds: f64,
    pub second_pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(SluError::invalid("aggregate of no values"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        // Nearest-rank percentile.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Aggregate { mean: v.iter().sum::<f64>() / n as f64, median, p95: v[rank - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfEntry {
    /// `None` is full audio.
    pub prefix_seconds: Option<f64>,
    /// Audio seconds processed per wall-clock second.
    pub real_time_factor: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub total: Aggregate,
    pub pass1: Aggregate,
    pub second_pass_fraction: f64,
    /// Mean always-second-pass time over mean routed time, when a baseline is given.
    pub speedup: Option<f64>,
    pub rtf: Vec<RtfEntry>,
}

/// Aggregates per-utterance timings. `baseline_mean` is the mean total time of
/// the always-second-pass configuration on the same utterances.
pub fn measure_latency(predictions: &[RoutedPrediction], baseline_mean: Option<f64>) -> Result<LatencyReport> {
    if predictions.is_empty() {
        return Err(SluError::invalid("latency report needs at least one prediction"));
    }
    let rows: Vec<LatencyRow> = predictions
        .iter()
        .map(|p| LatencyRow {
            t_pass1: p.timings.t_pass1,
            t_pass2: p.timings.t_pass2,
            t_total: p.timings.t_total,
            prefix_seconds: p.prefix_seconds,
            processed_seconds: p.processed_seconds,
            second_pass: p.source == Source::SecondPass,
        })
        .collect();
    report_from_rows(rows, baseline_mean)
}

pub fn report_from_rows(rows: Vec<LatencyRow>, baseline_mean: Option<f64>) -> Result<LatencyReport> {
    let totals: Vec<f64> = rows.iter().map(|r| r.t_total).collect();
    let total = Aggregate::of(&totals)?;
    let pass1 = Aggregate::of(&rows.iter().map(|r| r.t_pass1).collect::<Vec<_>>())?;
    let second = rows.iter().filter(|r| r.second_pass).count();
    let speedup = baseline_mean.filter(|_| total.mean > 0.0).map(|b| b / total.mean);
    let mut groups: BTreeMap<Option<u64>, (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        let g = groups.entry(r.prefix_seconds.map(f64::to_bits)).or_default();
        g.0 += r.processed_seconds;
        g.1 += r.t_total;
        g.2 += 1;
    }
    let rtf = groups
        .into_iter()
        .map(|(k, (audio, wall, count))| RtfEntry {
            prefix_seconds: k.map(f64::from_bits),
            real_time_factor: if wall > 0.0 { audio / wall } else { f64::INFINITY },
            count,
        })
        .collect();
    Ok(LatencyReport {
        second_pass_fraction: second as f64 / rows.len() as f64,
        rows,
        total,
        pass1,
        speedup,
        rtf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64) -> LatencyRow {
        LatencyRow { t_pass1: t, t_pass2: 0.0, t_total: t, prefix_seconds: Some(2.0), processed_seconds: 2.0, second_pass: false }
    }

    #[test]
    fn single_value_aggregate() {
        let r = report_from_rows(vec![row(0.25)], None).unwrap();
        assert_eq!(r.total, Aggregate { mean: 0.25, median: 0.25, p95: 0.25 });
        assert_eq!(r.rtf[0].real_time_factor, 8.0);
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows: Vec<LatencyRow> = (1..=20).map(|i| row(i as f64 * 0.01)).collect();
        let r = report_from_rows(rows, Some(0.42)).unwrap();
        let again = Aggregate::of(&r.rows.iter().map(|x| x.t_total).collect::<Vec<_>>()).unwrap();
        assert!((again.mean - r.total.mean).abs() < 1e-12);
        assert!((r.total.mean - 0.105).abs() < 1e-12);
        assert!((r.total.median - 0.105).abs() < 1e-12);
        assert!((r.total.p95 - 0.19).abs() < 1e-12);
        assert!((r.speedup.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(measure_latency(&[], None).is_err());
    }
}
