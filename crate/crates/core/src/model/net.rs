use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Bottleneck, PredictConfig, ProbMode, TrainConfig, Variant, HARD_SCALE};
use crate::error::{Error, Result};
use crate::gauss::{build_cholesky, raw_from_cholesky, sigmoid, tri_len, ConceptDistribution};
use crate::nn::tape::{logistic, softmax_in_place};
use crate::nn::{BatchStats, MlpSpec, Mode, ParamStore, Tape, Var};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

const BACKBONE: &str = "backbone";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";
const GLOBAL_RAW: &str = "global.raw";

/// Number of target classes.
pub const CLASSES: usize = 2;

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub concepts: usize,
    pub backbone: MlpSpec,
    pub params: ParamStore,
}

/// Standard-normal and uniform draws for `rows · M` samples.
#[derive(Clone, Debug)]
pub struct Noise {
    pub eps: Tensor,
    pub uniforms: Tensor,
}

impl Noise {
    /// Draws all normals first, then all uniforms, row by row.
    pub fn draw(rows: usize, samples: usize, dim: usize, rng: &mut RandomStream) -> Self {
        let eps = Tensor::from_vec(rows * samples, dim, rng.normals(rows * samples * dim));
        let uniforms =
            Tensor::from_vec(rows * samples, dim, rng.uniforms_open(rows * samples * dim));
        Self { eps, uniforms }
    }
}

/// Batch-mean loss terms and the recorded total.
pub struct LossParts {
    pub total: Var,
    pub concept_nll: f64,
    pub target: f64,
    pub penalty: f64,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub concept_probs: Vec<f64>,
    pub target_probs: Vec<f64>,
}

impl Model {
    pub fn new(variant: Variant, features: usize, concepts: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if features == 0 || concepts == 0 {
            return Err(Error::Config("model needs at least one feature and one concept".into()));
        }
        let out = match variant {
            Variant::Amortized => concepts + tri_len(concepts),
            Variant::Global | Variant::HardCbm => concepts,
        };
        let mut backbone = MlpSpec::relu_stack(features, cfg.hidden, cfg.depth, out);
        backbone.batch_norm = cfg.batch_norm;
        backbone.dropout = cfg.dropout;

        let mut rng = RandomStream::derive(cfg.seed, &[0]);
        let mut params = ParamStore::new();
        backbone.init(BACKBONE, &mut params, &mut rng)?;
        let bound = (3.0 / concepts as f64).sqrt();
        let w = (0..concepts * CLASSES)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        params.insert(HEAD_W, Tensor::from_vec(concepts, CLASSES, w), true);
        params.insert(HEAD_B, Tensor::zeros(1, CLASSES), true);
        if variant == Variant::Global {
            let raw = raw_from_cholesky(&DMatrix::identity(concepts, concepts))?;
            params.insert(GLOBAL_RAW, Tensor::row_vector(raw), true);
        }
        Ok(Self {
            variant,
            concepts,
            backbone,
            params,
        })
    }

    pub fn features(&self) -> usize {
        self.backbone.input
    }

    /// Sets the global factor; only valid for the global variant.
    pub fn set_global_cholesky(&mut self, l: &DMatrix<f64>) -> Result<()> {
        if self.variant != Variant::Global {
            return Err(Error::Usage("only the global variant has a shared factor".into()));
        }
        self.params
            .set(GLOBAL_RAW, Tensor::row_vector(raw_from_cholesky(l)?))
    }

    pub fn global_cholesky(&self) -> Option<DMatrix<f64>> {
        let raw = self.params.get(GLOBAL_RAW)?;
        build_cholesky(raw.data()).ok()
    }

    /// Records the concept distribution: means (`rows × C`) and flattened
    /// factors (`rows × C²`, or `1 × C²` when shared).
    fn head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<(Var, Var, Vec<(usize, BatchStats)>)> {
        let c = self.concepts;
        let xv = tape.constant(x.clone());
        let out = self.backbone.forward(tape, BACKBONE, store, xv, mode, rng)?;
        let mu = tape.slice_cols(out.out, 0, c)?;
        let chol = match self.variant {
            Variant::Amortized => {
                let raw = tape.slice_cols(out.out, c, tri_len(c))?;
                tape.cholesky_from_raw(raw, c)?
            }
            Variant::Global => {
                let raw = tape.param(store, GLOBAL_RAW)?;
                tape.cholesky_from_raw(raw, c)?
            }
            Variant::HardCbm => {
                let mut l = Tensor::zeros(1, c * c);
                for i in 0..c {
                    l.set(0, i * c + i, HARD_SCALE);
                }
                tape.constant(l)
            }
        };
        Ok((mu, chol, out.batch_stats))
    }

    /// Records the batch-mean training loss
    /// `concept_nll + λ₁·target + λ₂·penalty` for parameters `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        concepts: &Tensor,
        labels: &[usize],
        cfg: &TrainConfig,
        noise: &Noise,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<LossParts> {
        let (b, c, m) = (x.rows(), self.concepts, cfg.mc_samples);
        if concepts.shape() != (b, c) || labels.len() != b {
            return Err(Error::Config(format!(
                "batch of {b} rows has concepts {:?} and {} labels",
                concepts.shape(),
                labels.len()
            )));
        }
        let (mu, chol, batch_stats) = self.head(tape, store, x, mode, rng)?;
        let eta = tape.reparam(mu, chol, noise.eps.clone(), m)?;

        let bce = tape.bce_sum(eta, concepts.repeat_rows(m))?;
        let ll = tape.scale(bce, -1.0);
        let lse = tape.group_logsumexp(ll, m)?;
        let nll = tape.scale(lse, -1.0);
        let concept_term = tape.mean(nll);

        let hard = tape.gumbel_binary(
            eta,
            &noise.uniforms,
            cfg.tau,
            cfg.bottleneck == Bottleneck::StraightThrough,
        )?;
        let hw = tape.param(store, HEAD_W)?;
        let hb = tape.param(store, HEAD_B)?;
        let z = tape.matmul(hard, hw)?;
        let logits = tape.add_bias(z, hb)?;
        let probs = tape.softmax(logits);
        let avg = tape.group_mean(probs, m)?;
        let ce = tape.pick_neg_log(avg, labels.to_vec())?;
        let target_term = tape.mean(ce);

        let mut total = concept_term;
        if cfg.lambda1 != 0.0 {
            let t = tape.scale(target_term, cfg.lambda1);
            total = tape.add(total, t)?;
        }
        let lambda2 = cfg.lambda2_for(self.variant);
        let mut penalty = 0.0;
        if self.variant != Variant::HardCbm {
            let pen = tape.precision_penalty(chol, c, cfg.penalty)?;
            let pen_mean = tape.mean(pen);
            penalty = tape.value(pen_mean).get(0, 0);
            if lambda2 != 0.0 {
                let p = tape.scale(pen_mean, lambda2);
                total = tape.add(total, p)?;
            }
        }
        Ok(LossParts {
            total,
            concept_nll: tape.value(concept_term).get(0, 0),
            target: tape.value(target_term).get(0, 0),
            penalty,
            batch_stats,
        })
    }

    /// Loss value and parameter gradients at `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        x: &Tensor,
        concepts: &Tensor,
        labels: &[usize],
        cfg: &TrainConfig,
        noise: &Noise,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<(f64, ParamStore, Vec<(usize, BatchStats)>)> {
        let mut tape = Tape::new();
        let parts = self.loss(&mut tape, store, x, concepts, labels, cfg, noise, mode, rng)?;
        let value = tape.value(parts.total).get(0, 0);
        let grads = tape.backward(parts.total, store)?;
        Ok((value, grads, parts.batch_stats))
    }

    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        self.backbone
            .update_running_stats(BACKBONE, &mut self.params, stats)
    }

    /// Eval-mode concept distribution for every row of `x`.
    pub fn distributions(&self, x: &Tensor) -> Result<Vec<ConceptDistribution>> {
        let mut tape = Tape::new();
        let mut rng = RandomStream::new(0);
        let (mu, chol, _) = self.head(&mut tape, &self.params, x, Mode::Eval, &mut rng)?;
        let (mu, chol) = (tape.value(mu), tape.value(chol));
        let c = self.concepts;
        (0..x.rows())
            .map(|r| {
                let lr = if chol.rows() == 1 { 0 } else { r };
                let l = DMatrix::from_row_slice(c, c, chol.row(lr));
                ConceptDistribution::new(DVector::from_row_slice(mu.row(r)), l)
            })
            .collect()
    }

    /// Eval-mode logit means, `rows × C`.
    pub fn means(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.backbone.predict(BACKBONE, &self.params, x)?;
        let mut mu = Tensor::zeros(x.rows(), self.concepts);
        for r in 0..x.rows() {
            mu.row_mut(r).copy_from_slice(&out.row(r)[..self.concepts]);
        }
        Ok(mu)
    }

    /// Class probabilities `softmax(c·W + b)` of one concept vector.
    pub fn target_probs(&self, c: &[f64]) -> Vec<f64> {
        let w = self.params.get(HEAD_W).expect("head weights");
        let b = self.params.get(HEAD_B).expect("head bias");
        let mut z = b.data().to_vec();
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            for (zk, wk) in z.iter_mut().zip(w.row(i)) {
                *zk += ci * wk;
            }
        }
        softmax_in_place(&mut z);
        z
    }

    /// Prediction for one instance.
    ///
    /// Draws `M × C` normals then `M × C` uniforms from `rng`. Concept
    /// probabilities follow `cfg.prob_mode`; target probabilities average the
    /// head over hard samples `1{η + logistic(u) ≥ 0}`.
    pub fn predict_dist(
        &self,
        dist: &ConceptDistribution,
        cfg: &PredictConfig,
        rng: &mut RandomStream,
    ) -> Prediction {
        let m = cfg.mc_samples.max(1);
        let c = dist.dim();
        let noise = Noise::draw(1, m, c, rng);
        let etas: Vec<Vec<f64>> = (0..m)
            .map(|s| dist.sample_with(noise.eps.row(s)).as_slice().to_vec())
            .collect();
        let concept_probs = match cfg.prob_mode {
            ProbMode::McMean => mc_sigmoid_mean(&etas, c),
            ProbMode::MeanLogit => dist.mean().iter().map(|&v| sigmoid(v)).collect(),
        };
        let mut target = vec![0.0; CLASSES];
        for (s, eta) in etas.iter().enumerate() {
            let hard = hard_from_logits(eta, noise.uniforms.row(s));
            for (t, p) in target.iter_mut().zip(self.target_probs(&hard)) {
                *t += p;
            }
        }
        for t in &mut target {
            *t /= m as f64;
        }
        Prediction {
            concept_probs,
            target_probs: target,
        }
    }

    /// Batch prediction; row `r` draws from `derive(seed, [keys[r], 0])`.
    ///
    /// Keys identify instances (dataset row indices) so a row's prediction
    /// does not depend on which other rows share the batch.
    pub fn predict(
        &self,
        x: &Tensor,
        keys: &[u64],
        cfg: &PredictConfig,
        seed: u64,
    ) -> Result<Vec<Prediction>> {
        if keys.len() != x.rows() {
            return Err(Error::Config(format!(
                "{} keys for {} rows",
                keys.len(),
                x.rows()
            )));
        }
        let dists = self.distributions(x)?;
        Ok(dists
            .iter()
            .zip(keys)
            .map(|(d, &k)| {
                let mut rng = RandomStream::derive(seed, &[k, 0]);
                self.predict_dist(d, cfg, &mut rng)
            })
            .collect())
    }
}

pub(crate) fn mc_sigmoid_mean(etas: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    for eta in etas {
        for (pi, &e) in p.iter_mut().zip(eta) {
            *pi += sigmoid(e);
        }
    }
    let m = etas.len() as f64;
    p.iter_mut().for_each(|v| *v /= m);
    p
}

/// Hard Gumbel sample from logits and matching uniforms.
pub(crate) fn hard_from_logits(eta: &[f64], uniforms: &[f64]) -> Vec<f64> {
    eta.iter()
        .zip(uniforms)
        .map(|(&z, &u)| if z + logistic(u) >= 0.0 { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            depth: 2,
            mc_samples: 3,
            batch_norm: false,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn global_factor_is_shared_across_inputs() {
        let m = Model::new(Variant::Global, 3, 4, &tiny_cfg()).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let d = m.distributions(&x).unwrap();
        assert_eq!(d[0].chol(), d[1].chol());
        assert_ne!(d[0].mean(), d[1].mean());
    }

    #[test]
    fn amortized_factor_is_valid() {
        let m = Model::new(Variant::Amortized, 3, 4, &tiny_cfg()).unwrap();
        let x = Tensor::from_rows(&[vec![10.0, -20.0, 3.0]]);
        let d = m.distributions(&x).unwrap();
        assert!(d[0].chol().diagonal().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn target_probabilities_sum_to_one() {
        let m = Model::new(Variant::HardCbm, 3, 4, &tiny_cfg()).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let p = m.predict(&x, &[0], &PredictConfig::default(), 1).unwrap();
        assert!((p[0].target_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0].concept_probs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batched_and_single_prediction_agree_bitwise() {
        let m = Model::new(Variant::Amortized, 3, 4, &tiny_cfg()).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]);
        let all = m.distributions(&x).unwrap();
        let one = m.distributions(&x.select_rows(&[1])).unwrap();
        assert_eq!(all[1], one[0]);
    }
}
