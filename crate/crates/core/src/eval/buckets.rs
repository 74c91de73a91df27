use serde::{Deserialize, Serialize};

use super::metrics::wer;
use crate::error::{Result, SluError};
use crate::infer::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub support: usize,
    /// Percentages; `None` for an empty bucket.
    pub first_accuracy: Option<f64>,
    pub second_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub rows: Vec<BucketRow>,
}

impl BucketTable {
    pub fn total_support(&self) -> usize {
        self.rows.iter().map(|r| r.support).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            for a in [r.first_accuracy, r.second_accuracy].into_iter().flatten() {
                if !(0.0..=100.0).contains(&a) {
                    return Err(SluError::invalid(format!("bucket `{}` accuracy {a} outside [0, 100]", r.label)));
                }
            }
            let empty = r.support == 0;
            if !empty && (r.first_accuracy.is_none() || r.second_accuracy.is_none()) {
                return Err(SluError::invalid(format!("bucket `{}` has support but no accuracy", r.label)));
            }
        }
        Ok(())
    }

    /// `label,support,first_accuracy,second_accuracy` with empty cells for
    /// empty buckets.
    pub fn to_csv(&self) -> String {
        let cell = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut out = String::from("label,support,first_accuracy,second_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.support, cell(r.first_accuracy), cell(r.second_accuracy)));
        }
        out
    }
}

fn row(label: String, members: &[&PredictionRecord]) -> Result<BucketRow> {
    if members.is_empty() {
        return Ok(BucketRow { label, support: 0, first_accuracy: None, second_accuracy: None });
    }
    let mut first = 0usize;
    let mut second = 0usize;
    for r in members {
        let p2 = r
            .pass2_intent
            .as_ref()
            .ok_or_else(|| SluError::invalid(format!("{} lacks a second-pass intent; evaluate both passes", r.utt_id)))?;
        first += usize::from(r.pass1_intent == r.intent_true);
        second += usize::from(*p2 == r.intent_true);
    }
    let n = members.len() as f64;
    Ok(BucketRow {
        label,
        support: members.len(),
        first_accuracy: Some(100.0 * first as f64 / n),
        second_accuracy: Some(100.0 * second as f64 / n),
    })
}

/// Two rows: first-pass confidence `≥ threshold`, then `< threshold`.
pub fn bucket_by_confidence(records: &[PredictionRecord], threshold: f64) -> Result<BucketTable> {
    let (hi, lo): (Vec<&PredictionRecord>, Vec<&PredictionRecord>) =
        records.iter().partition(|r| r.confidence >= threshold);
    Ok(BucketTable { rows: vec![row(format!(">={threshold}"), &hi)?, row(format!("<{threshold}"), &lo)?] })
}

/// Support-weighted accuracy of answering confident rows (the first row)
/// with the first pass and the rest with the second pass.
pub fn routed_accuracy(table: &BucketTable) -> Result<f64> {
    table.validate()?;
    if table.rows.len() > 2 {
        return Err(SluError::invalid("routing needs a high/low confidence table"));
    }
    let total = table.total_support();
    if total == 0 {
        return Err(SluError::invalid("routed accuracy of an empty table"));
    }
    let mut sum = 0.0;
    for (i, r) in table.rows.iter().enumerate() {
        let acc = if i == 0 { r.first_accuracy } else { r.second_accuracy };
        sum += r.support as f64 * acc.unwrap_or(0.0);
    }
    Ok(sum / total as f64)
}

/// Default WER bucket edges, in percent.
pub const WER_EDGES: [f64; 5] = [0.0, 5.0, 15.0, 30.0, 100.0];

/// First-pass transcript WER of a record, in percent.
pub fn record_wer(r: &PredictionRecord) -> Result<f64> {
    Ok(100.0 * wer(&r.pass1_transcript, &r.transcript_true)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerBuckets {
    pub edges: Vec<f64>,
    pub table: BucketTable,
    /// Share of utterances whose first-pass WER is below 5%.
    pub fraction_below_5: f64,
}

/// Index of the bucket holding `w`: `[e_k, e_{k+1})`, with the last bucket
/// also taking everything at or above its lower edge.
pub fn wer_bucket_index(edges: &[f64], w: f64) -> Option<usize> {
    let n = edges.len() - 1;
    if w < edges[0] {
        return None;
    }
    Some((0..n).find(|&k| w < edges[k + 1]).unwrap_or(n - 1))
}

pub fn bucket_by_wer(records: &[PredictionRecord], edges: &[f64]) -> Result<WerBuckets> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(SluError::invalid(format!("bucket edges must be finite and strictly increasing: {edges:?}")));
    }
    let wers = records.iter().map(record_wer).collect::<Result<Vec<_>>>()?;
    let mut members: Vec<Vec<&PredictionRecord>> = vec![Vec::new(); edges.len() - 1];
    for (r, &w) in records.iter().zip(&wers) {
        let k = wer_bucket_index(edges, w)
            .ok_or_else(|| SluError::invalid(format!("WER {w} of {} below the first edge", r.utt_id)))?;
        members[k].push(r);
    }
    let n = edges.len() - 1;
    let rows = members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let close = if k + 1 == n { "]" } else { ")" };
            row(format!("[{},{}{close}", edges[k], edges[k + 1]), m)
        })
        .collect::<Result<Vec<_>>>()?;
    let below = wers.iter().filter(|&&w| w < 5.0).count();
    Ok(WerBuckets {
        edges: edges.to_vec(),
        table: BucketTable { rows },
        fraction_below_5: if records.is_empty() { 0.0 } else { below as f64 / records.len() as f64 },
    })
}

/// Second-minus-first accuracy (points) over records whose WER lies in `[lo, hi)`.
pub fn accuracy_gap(records: &[PredictionRecord], lo: f64, hi: f64) -> Result<Option<f64>> {
    let mut members = Vec::new();
    for r in records {
        let w = record_wer(r)?;
        if w >= lo && w < hi {
            members.push(r);
        }
    }
    let r = row(String::new(), &members)?;
    Ok(r.first_accuracy.zip(r.second_accuracy).map(|(a, b)| b - a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::Source;

    pub(crate) fn record(id: &str, conf: f64, p1: &str, p2: &str, gold: &str, hyp: &str, truth: &str) -> PredictionRecord {
        let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        PredictionRecord {
            utt_id: id.into(),
            intent_pred: p1.into(),
            intent_true: gold.into(),
            source: Source::FirstPass,
            confidence: conf,
            transcript_pred: split(hyp),
            t_pass1: 0.0,
            t_pass2: 0.0,
            t_total: 0.0,
            prefix_seconds: None,
            transcript_true: split(truth),
            pass1_intent: p1.into(),
            pass1_transcript: split(hyp),
            pass2_intent: Some(p2.into()),
            pass2_transcript: None,
            audio_seconds: 1.0,
            processed_seconds: 1.0,
        }
    }

    #[test]
    fn zero_threshold_fills_one_bucket() {
        let rs = vec![record("a", 0.3, "x", "x", "x", "w", "w"), record("b", 0.9, "x", "y", "y", "w", "w")];
        let t = bucket_by_confidence(&rs, 0.0).unwrap();
        assert_eq!(t.rows[0].support, 2);
        assert_eq!(t.rows[1].support, 0);
        assert_eq!(t.rows[0].first_accuracy, Some(50.0));
        assert_eq!(routed_accuracy(&t).unwrap(), 50.0);
    }

    #[test]
    fn missing_second_pass_is_error() {
        let mut r = record("a", 0.3, "x", "x", "x", "w", "w");
        r.pass2_intent = None;
        assert!(bucket_by_confidence(&[r], 0.5).is_err());
    }

    #[test]
    fn wer_buckets() {
        let rs = vec![
            record("a", 0.3, "x", "x", "x", "a b c d", "a b c d"),
            record("b", 0.3, "x", "y", "y", "a b q d", "a b c d"),
            record("c", 0.3, "y", "x", "x", "q r s t u", "a b c d"),
        ];
        let b = bucket_by_wer(&rs, &WER_EDGES).unwrap();
        let supports: Vec<usize> = b.table.rows.iter().map(|r| r.support).collect();
        assert_eq!(supports, vec![1, 0, 1, 1]);
        assert!((b.fraction_below_5 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_gap(&rs, 15.0, f64::INFINITY).unwrap(), Some(100.0));
        assert_eq!(accuracy_gap(&rs, 0.0, 5.0).unwrap(), Some(0.0));
        assert!(bucket_by_wer(&rs, &[0.0, 5.0, 5.0]).is_err());
        assert!(bucket_by_wer(&rs, &[5.0, 0.0]).is_err());
    }

    #[test]
    fn all_zero_wer_is_one_bucket() {
        let rs: Vec<_> = (0..5).map(|i| record(&format!("u{i}"), 0.5, "x", "x", "x", "a b", "a b")).collect();
        let b = bucket_by_wer(&rs, &WER_EDGES).unwrap();
        assert_eq!(b.table.rows.iter().filter(|r| r.support > 0).count(), 1);
        assert_eq!(b.table.total_support(), 5);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rs = vec![record("a", 0.3, "x", "x", "x", "w", "w")];
        let csv = bucket_by_confidence(&rs, 0.8).unwrap().to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,,"));
    }
}
