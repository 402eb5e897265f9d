use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOW_Q: f64 = 0.05;
pub const HIGH_Q: f64 = 0.95;

/// Per-concept 5th and 95th percentiles of training logit means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl PercentileTable {
    /// Percentiles of each column of `logits` (`rows × C`).
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (n, c) = logits.shape();
        if n == 0 {
            return Err(Error::Usage(
                "percentile table needs at least one training row".into(),
            ));
        }
        let mut low = Vec::with_capacity(c);
        let mut high = Vec::with_capacity(c);
        for j in 0..c {
            let mut col: Vec<f64> = (0..n).map(|i| logits.get(i, j)).collect();
            col.sort_by(f64::total_cmp);
            low.push(quantile_sorted(&col, LOW_Q));
            high.push(quantile_sorted(&col, HIGH_Q));
        }
        Ok(Self { low, high })
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

/// Linear interpolation between order statistics at position `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
