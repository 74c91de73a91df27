use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Result, SluError};
use crate::infer::{infer_first_pass, parallel_map, InferenceOptions};
use crate::model::TwoPassModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixPoint {
    /// Infinite means full audio.
    pub prefix_seconds: f64,
    pub accuracy: f64,
    pub mean_wall_seconds: Option<f64>,
    /// Audio seconds processed per wall-clock second.
    pub real_time_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixCurve {
    pub points: Vec<PrefixPoint>,
}

fn check_increasing(prefixes: &[f64]) -> Result<()> {
    if prefixes.iter().any(|p| p.is_nan() || *p <= 0.0) || prefixes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SluError::invalid(format!("prefixes must be positive and strictly increasing: {prefixes:?}")));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl PrefixCurve {
    pub fn new(points: Vec<PrefixPoint>) -> Result<Self> {
        check_increasing(&points.iter().map(|p| p.prefix_seconds).collect::<Vec<_>>())?;
        Ok(PrefixCurve { points })
    }

    /// True when no point falls more than `tolerance` points below an earlier one.
    pub fn is_monotone(&self, tolerance: f64) -> bool {
        let mut best = f64::NEG_INFINITY;
        for p in &self.points {
            if p.accuracy < best - tolerance {
                return false;
            }
            best = best.max(p.accuracy);
        }
        true
    }

    /// `prefix_seconds,accuracy,mean_wall_seconds,real_time_factor`; full
    /// audio is written as `inf`, missing values as empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prefix_seconds,accuracy,mean_wall_seconds,real_time_factor\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.prefix_seconds,
                p.accuracy,
                fmt_opt(p.mean_wall_seconds),
                fmt_opt(p.real_time_factor)
            ));
        }
        out
    }

    /// Reads [`to_csv`](Self::to_csv) output. Trailing columns may be omitted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| SluError::invalid(format!("prefix curve line {}: {msg}", i + 1));
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let num = |k: usize| -> Result<Option<f64>> {
                match cells.get(k) {
                    None | Some(&"") => Ok(None),
                    Some(s) => s.parse::<f64>().map(Some).map_err(|e| bad(format!("column {k}: {e}"))),
                }
            };
            let prefix_seconds = num(0)?.ok_or_else(|| bad("missing prefix".into()))?;
            let accuracy = num(1)?.ok_or_else(|| bad("missing accuracy".into()))?;
            points.push(PrefixPoint { prefix_seconds, accuracy, mean_wall_seconds: num(2)?, real_time_factor: num(3)? });
        }
        Self::new(points)
    }
}

/// First-pass accuracy, mean wall time and real-time factor at each prefix
/// length. Timings are only comparable with `workers = 1`.
pub fn prefix_sweep(
    model: &TwoPassModel,
    utts: &[&Utterance],
    prefixes: &[f64],
    opts: &InferenceOptions,
    workers: usize,
) -> Result<PrefixCurve> {
    check_increasing(prefixes)?;
    if utts.is_empty() {
        return Err(SluError::invalid("prefix sweep over no utterances"));
    }
    let mut points = Vec::with_capacity(prefixes.len());
    for &p in prefixes {
        let rows = parallel_map(utts, workers, |u| {
            let start = Instant::now();
            let out = infer_first_pass(model, &u.frames, Some(p), opts)?;
            Ok((out.pass.intent == u.intent, start.elapsed().as_secs_f64(), out.audio_seconds))
        })?;
        let n = rows.len() as f64;
        let correct = rows.iter().filter(|r| r.0).count() as f64;
        let wall: f64 = rows.iter().map(|r| r.1).sum();
        let audio: f64 = rows.iter().map(|r| r.2).sum();
        points.push(PrefixPoint {
            prefix_seconds: p,
            accuracy: 100.0 * correct / n,
            mean_wall_seconds: Some(wall / n),
            real_time_factor: (wall > 0.0).then(|| audio / wall),
        });
    }
    PrefixCurve::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_curve_round_trips() {
        let fixture = "prefix_seconds,accuracy\n1,35.6\n2,75.9\n3,83.6\n4,85.5\n5,86.0\n";
        let c = PrefixCurve::from_csv(fixture).unwrap();
        assert_eq!(c.points.len(), 5);
        assert_eq!(c.points[4].accuracy, 86.0);
        assert!(c.is_monotone(0.0));
        assert_eq!(PrefixCurve::from_csv(&c.to_csv()).unwrap(), c);
    }

    #[test]
    fn infinite_prefix_survives_csv() {
        let c = PrefixCurve::new(vec![
            PrefixPoint { prefix_seconds: 1.0, accuracy: 50.0, mean_wall_seconds: Some(0.01), real_time_factor: Some(100.0) },
            PrefixPoint { prefix_seconds: f64::INFINITY, accuracy: 90.0, mean_wall_seconds: None, real_time_factor: None },
        ])
        .unwrap();
        assert_eq!(PrefixCurve::from_csv(&c.to_csv()).unwrap(), c);
    }

    #[test]
    fn rejects_unordered_prefixes() {
        let p = |s| PrefixPoint { prefix_seconds: s, accuracy: 1.0, mean_wall_seconds: None, real_time_factor: None };
        assert!(PrefixCurve::new(vec![p(2.0), p(1.0)]).is_err());
        assert!(PrefixCurve::from_csv("h\n1,2\nx,3\n").is_err());
    }

    #[test]
    fn monotone_with_tolerance() {
        let p = |s, a| PrefixPoint { prefix_seconds: s, accuracy: a, mean_wall_seconds: None, real_time_factor: None };
        let c = PrefixCurve::new(vec![p(1.0, 50.0), p(2.0, 60.0), p(3.0, 59.5)]).unwrap();
        assert!(c.is_monotone(1.0));
        assert!(!c.is_monotone(0.1));
    }
}
