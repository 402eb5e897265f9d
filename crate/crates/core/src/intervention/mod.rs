//! Concept interventions through the conditional Gaussian.
//!
//! An intervention fixes a set `S` of concepts to known binary values. A
//! strategy turns those values into logits `η′_S`, the remaining logits are
//! conditioned on them, and the target head is re-evaluated on hard samples
//! with the intervened coordinates clamped.

mod curve;
mod percentile;
mod region;

pub use curve::{run_intervention_curve, CurvePoint, InterventionCurve};
pub use percentile::{quantile_sorted, PercentileTable, HIGH_Q, LOW_Q};
pub use region::{log_likelihood, nonneg_qp, solve_region, RegionSolution, SolverOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{condition, sigmoid, ConceptDistribution, ConditionalResult};
use crate::model::{Model, Noise, PredictConfig, ProbMode};
use crate::rng::RandomStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Percentile,
    #[default]
    ConfidenceRegion,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Percentile => "percentile",
            StrategyKind::ConfidenceRegion => "confidence-region",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "percentile" => Ok(Self::Percentile),
            "confidence-region" | "cr" => Ok(Self::ConfidenceRegion),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected percentile or confidence-region)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Confidence level `1 − α`.
    pub level: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::ConfidenceRegion,
            level: 0.99,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must be in (0, 1), got {}",
                self.level
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    Uncertainty,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Uncertainty => "uncertainty",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "uncertainty" => Ok(Self::Uncertainty),
            _ => Err(Error::Config(format!(
                "unknown policy {s:?} (expected random or uncertainty)"
            ))),
        }
    }
}

/// Outcome of intervening on `set` with `values`.
#[derive(Clone, Debug)]
pub struct InterventionState {
    pub set: Vec<usize>,
    pub values: Vec<f64>,
    /// Logits chosen for the intervened concepts, aligned with `set`.
    pub eta: Vec<f64>,
    /// Present when at least one concept remains free.
    pub conditional: Option<ConditionalResult>,
    /// All `C` concept probabilities; intervened entries equal their values.
    pub concept_probs: Vec<f64>,
    pub target_probs: Vec<f64>,
    /// False if the region solver stopped at its iteration cap.
    pub converged: bool,
}

/// `η′_i` = 95th percentile for `c_i = 1`, 5th percentile otherwise.
pub fn strategy_percentile(table: &PercentileTable, set: &[usize], values: &[f64]) -> Vec<f64> {
    set.iter()
        .zip(values)
        .map(|(&i, &v)| if v >= 0.5 { table.high[i] } else { table.low[i] })
        .collect()
}

pub fn strategy_confidence_region(
    dist: &ConceptDistribution,
    set: &[usize],
    values: &[f64],
    cfg: &StrategyConfig,
) -> Result<RegionSolution> {
    let marginal = dist.marginal(set)?;
    solve_region(&marginal, values, cfg.level, cfg.solver())
}

fn validate_set(dim: usize, set: &[usize], values: &[f64]) -> Result<()> {
    if set.len() != values.len() {
        return Err(Error::Usage(format!(
            "{} concepts but {} values",
            set.len(),
            values.len()
        )));
    }
    let mut seen = vec![false; dim];
    for &i in set {
        if i >= dim {
            return Err(Error::Usage(format!("concept index {i} out of range 0..{dim}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Usage(format!("concept {i} intervened twice")));
        }
    }
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Usage("intervention values must be 0 or 1".into()));
    }
    Ok(())
}

/// Applies an intervention to one instance's concept distribution.
///
/// With an empty set this is exactly [`Model::predict_dist`]. Otherwise
/// `rng` supplies `M × |R|` normals then `M × |R|` uniforms for the free
/// concepts `R`.
#[allow(clippy::too_many_arguments)]
pub fn apply_intervention(
    model: &Model,
    dist: &ConceptDistribution,
    table: &PercentileTable,
    set: &[usize],
    values: &[f64],
    strategy: &StrategyConfig,
    pcfg: &PredictConfig,
    rng: &mut RandomStream,
) -> Result<InterventionState> {
    let c = dist.dim();
    validate_set(c, set, values)?;
    if set.is_empty() {
        let pred = model.predict_dist(dist, pcfg, rng);
        return Ok(InterventionState {
            set: Vec::new(),
            values: Vec::new(),
            eta: Vec::new(),
            conditional: None,
            concept_probs: pred.concept_probs,
            target_probs: pred.target_probs,
            converged: true,
        });
    }
    let (eta, converged) = match strategy.kind {
        StrategyKind::Percentile => (strategy_percentile(table, set, values), true),
        StrategyKind::ConfidenceRegion => {
            let sol = strategy_confidence_region(dist, set, values, strategy)?;
            (sol.eta, sol.converged)
        }
    };
    let mut full = vec![0.0; c];
    for (&i, &v) in set.iter().zip(values) {
        full[i] = v;
    }
    if set.len() == c {
        return Ok(InterventionState {
            set: set.to_vec(),
            values: values.to_vec(),
            eta,
            conditional: None,
            concept_probs: full.clone(),
            target_probs: model.target_probs(&full),
            converged,
        });
    }

    let cond = condition(dist, set, &eta)?;
    let rest = cond.distribution()?;
    let m = pcfg.mc_samples.max(1);
    let noise = Noise::draw(1, m, rest.dim(), rng);
    let mut probs = vec![0.0; rest.dim()];
    let mut target = vec![0.0; model.target_probs(&full).len()];
    let mut sample = full.clone();
    for s in 0..m {
        let eta_r = rest.sample_with(noise.eps.row(s));
        for (((p, &e), &u), &i) in probs
            .iter_mut()
            .zip(eta_r.iter())
            .zip(noise.uniforms.row(s))
            .zip(&cond.remaining)
        {
            *p += sigmoid(e);
            sample[i] = if e + crate::nn::tape::logistic(u) >= 0.0 {
                1.0
            } else {
                0.0
            };
        }
        for (t, p) in target.iter_mut().zip(model.target_probs(&sample)) {
            *t += p;
        }
    }
    target.iter_mut().for_each(|t| *t /= m as f64);
    let mut concept_probs = full;
    for (k, &i) in cond.remaining.iter().enumerate() {
        concept_probs[i] = match pcfg.prob_mode {
            ProbMode::McMean => probs[k] / m as f64,
            ProbMode::MeanLogit => sigmoid(cond.mean[k]),
        };
    }
    Ok(InterventionState {
        set: set.to_vec(),
        values: values.to_vec(),
        eta,
        conditional: Some(cond),
        concept_probs,
        target_probs: target,
        converged,
    })
}

/// Next concept to intervene on.
///
/// Uncertainty picks the free concept with probability closest to 0.5
/// (lowest index on ties); random picks uniformly among free concepts.
pub fn policy_next(
    kind: PolicyKind,
    probs: &[f64],
    intervened: &[usize],
    rng: &mut RandomStream,
) -> Result<usize> {
    let mut taken = vec![false; probs.len()];
    for &i in intervened {
        if i < taken.len() {
            taken[i] = true;
        }
    }
    let free: Vec<usize> = (0..probs.len()).filter(|&i| !taken[i]).collect();
    if free.is_empty() {
        return Err(Error::Usage("every concept is already intervened".into()));
    }
    Ok(match kind {
        PolicyKind::Random => free[rng.below(free.len())],
        PolicyKind::Uncertainty => {
            let mut best = free[0];
            for &i in &free[1..] {
                if (probs[i] - 0.5).abs() < (probs[best] - 0.5).abs() {
                    best = i;
                }
            }
            best
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertainty_policy_examples() {
        let mut rng = RandomStream::new(0);
        assert_eq!(
            policy_next(PolicyKind::Uncertainty, &[0.9, 0.51, 0.1], &[], &mut rng).unwrap(),
            1
        );
        assert_eq!(
            policy_next(PolicyKind::Uncertainty, &[0.4, 0.6, 0.5], &[2], &mut rng).unwrap(),
            0
        );
        assert!(matches!(
            policy_next(PolicyKind::Random, &[0.4, 0.6], &[0, 1], &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn percentile_strategy_ignores_the_distribution() {
        let table = PercentileTable {
            low: vec![-2.0, -3.0],
            high: vec![2.0, 3.0],
        };
        assert_eq!(strategy_percentile(&table, &[1, 0], &[1.0, 0.0]), vec![3.0, -2.0]);
    }
}
