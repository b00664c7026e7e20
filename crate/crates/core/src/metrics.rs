//! Detection metrics: ROC AUC, equal error rate, accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation run on one split of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
    pub n: usize,
    pub domain: String,
    pub split: String,
    /// `[fpr, tpr]` pairs from strictest to loosest threshold.
    pub roc: Vec<[f64; 2]>,
}

impl MetricsReport {
    /// `scores` are fake-probabilities, `labels` are 1 for fake, `predicted` are argmax labels.
    pub fn compute(
        scores: &[f64],
        labels: &[u8],
        predicted: &[u8],
        domain: impl Into<String>,
        split: impl Into<String>,
    ) -> Result<Self> {
        Ok(MetricsReport {
            auc: auc(scores, labels)?,
            eer: eer(scores, labels)?,
            acc: acc(labels, predicted)?,
            n: labels.len(),
            domain: domain.into(),
            split: split.into(),
            roc: roc_curve(scores, labels)?,
        })
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "both classes required, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney U statistic over `pos·neg`, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, with midranks for ties, stays integral.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let pos = pos as u64;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg as u64) as f64)
}

/// Cumulative `(false positives, true positives)` after each distinct
/// threshold, strictest first, starting from `(0, 0)`.
fn threshold_counts(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut counts = vec![(0, 0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
    }
    counts
}

/// ROC points for every distinct threshold, starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<[f64; 2]>> {
    let (pos, neg) = class_counts(scores, labels)?;
    Ok(threshold_counts(scores, labels)
        .into_iter()
        .map(|(fp, tp)| [fp as f64 / neg as f64, tp as f64 / pos as f64])
        .collect())
}

/// Rate at which false-positive and false-negative rates meet, interpolated
/// linearly between adjacent thresholds.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let rates: Vec<(f64, f64)> = threshold_counts(scores, labels)
        .into_iter()
        .map(|(fp, tp)| (fp as f64 / neg as f64, (pos - tp) as f64 / pos as f64))
        .collect();
    let j = rates.iter().position(|(far, frr)| far - frr >= 0.0).unwrap_or(rates.len() - 1);
    let (far, frr) = rates[j];
    let dj = far - frr;
    if j == 0 || dj == 0.0 {
        return Ok(far);
    }
    let (pfar, pfrr) = rates[j - 1];
    let di = pfar - pfrr;
    let t = -di / (dj - di);
    Ok(pfar + t * (far - pfar))
}

/// Fraction of exact matches.
pub fn acc(labels: &[u8], predicted: &[u8]) -> Result<f64> {
    if labels.len() != predicted.len() {
        return Err(Error::Input(format!(
            "{} labels for {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests;
