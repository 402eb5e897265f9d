//! Per-instance loss terms without gradients.
//!
//! The training path records the same quantities on a tape (see
//! [`Model::loss`](super::Model::loss)); these scalar versions serve
//! prediction, validation and tests.

use crate::gauss::{sigmoid, ConceptDistribution};
use crate::nn::tape::{bce_with_logit, logistic, logsumexp};
use crate::rng::RandomStream;

/// `−logsumexp_m Σ_i −BCE(c_i, σ(η_i⁽ᵐ⁾))`, without the `log M` constant.
pub fn concept_nll_from_samples(c: &[f64], etas: &[Vec<f64>]) -> f64 {
    let ll: Vec<f64> = etas
        .iter()
        .map(|eta| {
            -eta.iter()
                .zip(c)
                .map(|(&z, &ci)| bce_with_logit(ci, z))
                .sum::<f64>()
        })
        .collect();
    -logsumexp(&ll)
}

/// Monte Carlo concept NLL with `m` reparameterized samples from `dist`.
pub fn concept_nll(c: &[f64], dist: &ConceptDistribution, m: usize, rng: &mut RandomStream) -> f64 {
    let etas: Vec<Vec<f64>> = (0..m)
        .map(|_| dist.sample(rng).as_slice().to_vec())
        .collect();
    concept_nll_from_samples(c, &etas)
}

/// Hard binary Gumbel sample: `1{σ((η + ln u − ln(1−u))/τ) ≥ 0.5}` per entry.
///
/// The outcome is Bernoulli(σ(η)) for every `τ`; the temperature only shapes
/// the straight-through gradient.
pub fn sample_hard_concepts(eta: &[f64], tau: f64, rng: &mut RandomStream) -> Vec<f64> {
    eta.iter()
        .map(|&z| {
            let u = rng.uniform_open();
            if sigmoid((z + logistic(u)) / tau) >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Cross-entropy of label `y` against the mean of per-sample class probabilities.
pub fn target_term(y: usize, sample_probs: &[Vec<f64>]) -> f64 {
    let m = sample_probs.len() as f64;
    let p: f64 = sample_probs.iter().map(|p| p[y]).sum::<f64>() / m;
    -p.ln()
}
