//! Concept and target evaluation metrics.
//!
//! Concept metrics pool all `N·C` entries of a probability matrix and a
//! binary truth matrix, both passed flattened in the same order. A concept
//! is predicted present when its probability is at least 0.5.

use serde::{Deserialize, Serialize};

use crate::model::Prediction;

pub const ECE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub target_accuracy: f64,
    pub concept_accuracy: f64,
    pub jaccard: f64,
    pub brier: f64,
    pub ece: f64,
}

fn check(p: &[f64], c: &[f64]) {
    assert_eq!(p.len(), c.len(), "probabilities and concepts differ in size");
}

#[inline]
fn predicted(p: f64) -> bool {
    p >= 0.5
}

pub fn concept_accuracy(p: &[f64], c: &[f64]) -> f64 {
    check(p, c);
    if p.is_empty() {
        return 0.0;
    }
    let correct = p
        .iter()
        .zip(c)
        .filter(|(&pi, &ci)| predicted(pi) == (ci == 1.0))
        .count();
    correct as f64 / p.len() as f64
}

/// Intersection over union of predicted and true positives; 1 when both are empty.
pub fn jaccard(p: &[f64], c: &[f64]) -> f64 {
    check(p, c);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&pi, &ci) in p.iter().zip(c) {
        let (a, b) = (predicted(pi), ci == 1.0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn brier(p: &[f64], c: &[f64]) -> f64 {
    check(p, c);
    if p.is_empty() {
        return 0.0;
    }
    p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

/// Expected calibration error over `bins` equal-width confidence bins on
/// `[0.5, 1]`, confidence `max(p, 1 − p)`.
///
/// # Panics
/// If `bins == 0`.
pub fn ece(p: &[f64], c: &[f64], bins: usize) -> f64 {
    check(p, c);
    assert!(bins >= 1, "ECE needs at least one bin");
    if p.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&pi, &ci) in p.iter().zip(c) {
        let conf = pi.max(1.0 - pi);
        let b = (((conf - 0.5) / 0.5 * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        acc_sum[b] += f64::from(u8::from(predicted(pi) == (ci == 1.0)));
    }
    let total = p.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            n / total * (acc_sum[b] / n - conf_sum[b] / n).abs()
        })
        .sum()
}

/// Index of the largest entry, the first one on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn target_accuracy(target_probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(target_probs.len(), labels.len(), "predictions and labels differ in size");
    if labels.is_empty() {
        return 0.0;
    }
    let correct = target_probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// All metrics for per-row predictions against flattened concepts and labels.
pub fn report(preds: &[Prediction], concepts: &[f64], labels: &[usize]) -> MetricReport {
    let p: Vec<f64> = preds
        .iter()
        .flat_map(|r| r.concept_probs.iter().copied())
        .collect();
    let t: Vec<Vec<f64>> = preds.iter().map(|r| r.target_probs.clone()).collect();
    MetricReport {
        target_accuracy: target_accuracy(&t, labels),
        concept_accuracy: concept_accuracy(&p, concepts),
        jaccard: jaccard(&p, concepts),
        brier: brier(&p, concepts),
        ece: ece(&p, concepts, ECE_BINS),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_predictions() {
        let c = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(concept_accuracy(&c, &c), 1.0);
        let inv: Vec<f64> = c.iter().map(|v| 1.0 - v).collect();
        assert_eq!(concept_accuracy(&inv, &c), 0.0);
        assert_eq!(brier(&c, &c), 0.0);
        assert_eq!(jaccard(&c, &c), 1.0);
    }

    #[test]
    fn empty_positive_sets_have_unit_jaccard() {
        assert_eq!(jaccard(&[0.1, 0.2], &[0.0, 0.0]), 1.0);
        assert_eq!(jaccard(&[0.9, 0.2], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn uniform_half_has_quarter_brier() {
        assert_eq!(brier(&[0.5; 4], &[1.0, 0.0, 1.0, 1.0]), 0.25);
    }

    #[test]
    fn confident_and_wrong_has_unit_ece() {
        assert_eq!(ece(&[1.0, 0.0], &[0.0, 1.0], ECE_BINS), 1.0);
    }
}
