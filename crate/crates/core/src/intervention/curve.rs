use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{apply_intervention, policy_next, PolicyKind, StrategyConfig};
use crate::error::Result;
use crate::metrics::argmax;
use crate::model::{Checkpoint, PredictConfig};
use crate::rng::RandomStream;
use crate::synth::Batch;

/// Path component of the policy stream, disjoint from step indices.
pub const POLICY_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub concept_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub points: Vec<CurvePoint>,
    /// Requested `max_k` exceeded the number of concepts.
    pub clipped: bool,
    /// Interventions whose region solver hit its iteration cap.
    pub unconverged: usize,
}

/// Simulates an oracle user on every row of `batch`.
///
/// At step `k` the policy picks a concept, it is set to its true value, and
/// the intervention is recomputed for the whole accumulated set. Row `key`
/// (its dataset index) draws step `k` from `derive(seed, [key, k])`, so step
/// 0 coincides with [`Model::predict`](crate::model::Model::predict) under
/// the same seed.
pub fn run_intervention_curve(
    ckpt: &Checkpoint,
    batch: &Batch,
    policy: PolicyKind,
    strategy: &StrategyConfig,
    pcfg: &PredictConfig,
    max_k: usize,
    seed: u64,
) -> Result<InterventionCurve> {
    strategy.validate()?;
    let model = &ckpt.model;
    let c = model.concepts;
    let clipped = max_k > c;
    if clipped {
        warn!(max_k, concepts = c, "max_k exceeds the number of concepts; clipping");
    }
    let max_k = max_k.min(c);
    let dists = model.distributions(&batch.x)?;

    let rows: Vec<Result<(Vec<usize>, Vec<bool>, usize)>> = dists
        .par_iter()
        .enumerate()
        .map(|(r, dist)| {
            let key = batch.rows[r] as u64;
            let truth = batch.concepts.row(r);
            let label = batch.labels[r];
            let mut policy_rng = RandomStream::derive(seed, &[key, POLICY_STREAM]);
            let mut set = Vec::with_capacity(max_k);
            let mut values = Vec::with_capacity(max_k);
            let mut concept_correct = Vec::with_capacity(max_k + 1);
            let mut target_ok = Vec::with_capacity(max_k + 1);
            let mut unconverged = 0;
            for k in 0..=max_k {
                let mut rng = RandomStream::derive(seed, &[key, k as u64]);
                let state = apply_intervention(
                    model,
                    dist,
                    &ckpt.percentiles,
                    &set,
                    &values,
                    strategy,
                    pcfg,
                    &mut rng,
                )?;
                if !state.converged {
                    unconverged += 1;
                }
                let correct = state
                    .concept_probs
                    .iter()
                    .zip(truth)
                    .filter(|(&p, &t)| (p >= 0.5) == (t == 1.0))
                    .count();
                concept_correct.push(correct);
                target_ok.push(argmax(&state.target_probs) == label);
                if k < max_k {
                    let next = policy_next(policy, &state.concept_probs, &set, &mut policy_rng)?;
                    set.push(next);
                    values.push(truth[next]);
                }
            }
            Ok((concept_correct, target_ok, unconverged))
        })
        .collect();

    let n = batch.rows.len().max(1) as f64;
    let entries = (batch.rows.len() * c).max(1) as f64;
    let mut concept = vec![0usize; max_k + 1];
    let mut target = vec![0usize; max_k + 1];
    let mut unconverged = 0;
    for row in rows {
        let (ca, tk, u) = row?;
        for k in 0..=max_k {
            concept[k] += ca[k];
            target[k] += usize::from(tk[k]);
        }
        unconverged += u;
    }
    let points = (0..=max_k)
        .map(|k| CurvePoint {
            k,
            concept_accuracy: concept[k] as f64 / entries,
            target_accuracy: target[k] as f64 / n,
        })
        .collect();
    Ok(InterventionCurve {
        points,
        clipped,
        unconverged,
    })
}
