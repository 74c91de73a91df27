use serde::{Deserialize, Serialize};

use crate::error::{Result, SluError};

/// Percentage of `(predicted, gold)` pairs that agree.
pub fn intent_accuracy<P: AsRef<str>, G: AsRef<str>>(pairs: &[(P, G)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SluError::invalid("accuracy of no predictions"));
    }
    let mut correct = 0usize;
    for (i, (p, g)) in pairs.iter().enumerate() {
        if g.as_ref().is_empty() {
            return Err(SluError::invalid(format!("prediction {i} has no gold label")));
        }
        correct += usize::from(p.as_ref() == g.as_ref());
    }
    Ok(100.0 * correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum-edit alignment of `hyp` against `reference`. Among optimal
/// alignments, substitutions are preferred over insertion/deletion pairs.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Word error rate of `hyp` against a non-empty `reference`.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(SluError::invalid("word error rate needs a non-empty reference"));
    }
    Ok(align(hyp, reference).total() as f64 / reference.len() as f64)
}
