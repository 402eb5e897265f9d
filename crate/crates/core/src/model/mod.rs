//! Concept-bottleneck models with Gaussian concept logits.
//!
//! Three variants share one backbone and one linear target head:
//! `Global` learns a single Cholesky factor, `Amortized` predicts one per
//! input, and `HardCbm` fixes it to `1e-3·I` (independent concepts).

mod checkpoint;
mod loss;
mod net;
mod train;

pub use checkpoint::{Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use loss::{concept_nll, concept_nll_from_samples, sample_hard_concepts, target_term};
pub use net::{LossParts, Model, Noise, Prediction};
pub use train::{train, EpochRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::PenaltyKind;

/// Diagonal scale of the fixed factor used by the hard CBM.
pub const HARD_SCALE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Global,
    Amortized,
    HardCbm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::Amortized => "amortized",
            Variant::HardCbm => "hard-cbm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Variant::Global),
            "amortized" => Ok(Variant::Amortized),
            "hard-cbm" | "hard" => Ok(Variant::HardCbm),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected global, amortized or hard-cbm)"
            ))),
        }
    }

    pub fn default_lambda2(self) -> f64 {
        match self {
            Variant::Amortized => 1.0,
            Variant::Global | Variant::HardCbm => 0.0,
        }
    }
}

/// How the global factor is initialized before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalInit {
    /// Cholesky factor of `4·cov(c_train) + 1e-3·I`.
    #[default]
    Empirical,
    Identity,
}

/// Which quantity is reported as the concept probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbMode {
    /// Monte Carlo mean of `σ(η)`.
    #[default]
    McMean,
    /// `σ(μ)`.
    MeanLogit,
}

/// Forward value of the sampled bottleneck during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bottleneck {
    /// Binary forward value, relaxed gradient.
    #[default]
    StraightThrough,
    /// Relaxed value in both passes; differentiable, used for gradient checks.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Monte Carlo samples `M` per instance.
    pub mc_samples: usize,
    pub lambda1: f64,
    /// `None` selects the variant default (1 amortized, 0 otherwise).
    pub lambda2: Option<f64>,
    pub tau: f64,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub penalty: PenaltyKind,
    pub global_init: GlobalInit,
    pub bottleneck: Bottleneck,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            lr: 1e-4,
            mc_samples: 100,
            lambda1: 1.0,
            lambda2: None,
            tau: 1.0,
            seed: 0,
            hidden: 128,
            depth: 3,
            batch_norm: true,
            dropout: 0.1,
            penalty: PenaltyKind::Signed,
            global_init: GlobalInit::Empirical,
            bottleneck: Bottleneck::StraightThrough,
        }
    }
}

impl TrainConfig {
    pub fn lambda2_for(&self, variant: Variant) -> f64 {
        match variant {
            Variant::HardCbm => 0.0,
            v => self.lambda2.unwrap_or_else(|| v.default_lambda2()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda1 >= 0.0) || self.lambda2.is_some_and(|l| !(l >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("Gumbel temperature must be > 0, got {}", self.tau));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Monte Carlo settings for prediction and interventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub mc_samples: usize,
    pub prob_mode: ProbMode,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mc_samples: 100,
            prob_mode: ProbMode::McMean,
        }
    }
}
