//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use scbm::gauss::PenaltyKind;
use scbm::model::{Bottleneck, Model, Noise, TrainConfig, Variant};
use scbm::nn::Mode;
use scbm::rng::RandomStream;
use scbm::tensor::Tensor;

/// `A·Aᵀ + δ·I` with standard-normal `A`, scaled so diagonals are O(1).
pub fn random_spd(c: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(c, c, |_, _| rng.normal());
    let delta = 0.05 + rng.uniform();
    (&a * a.transpose()) / c as f64 + DMatrix::identity(c, c) * delta
}

pub fn random_vector(c: usize, scale: f64, rng: &mut RandomStream) -> DVector<f64> {
    DVector::from_fn(c, |_, _| scale * rng.normal())
}

/// Conditional mean and covariance by explicit dense inversion.
pub fn dense_condition(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    s: &[usize],
    eta_s: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let r: Vec<usize> = (0..mu.len()).filter(|i| !s.contains(i)).collect();
    let pick = |a: &[usize], b: &[usize]| DMatrix::from_fn(a.len(), b.len(), |i, j| sigma[(a[i], b[j])]);
    let s_ss_inv = pick(s, s).try_inverse().expect("invertible block");
    let s_rs = pick(&r, s);
    let diff = DVector::from_iterator(s.len(), s.iter().zip(eta_s).map(|(&i, &e)| e - mu[i]));
    let mean = DVector::from_iterator(r.len(), r.iter().map(|&i| mu[i])) + &s_rs * &s_ss_inv * diff;
    let cov = pick(&r, &r) - &s_rs * &s_ss_inv * s_rs.transpose();
    (mean, cov)
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// A tiny model configuration drawn at random; the relaxed bottleneck makes
/// the loss differentiable everywhere the finite-difference check probes.
pub struct TinyCase {
    pub model: Model,
    pub cfg: TrainConfig,
    pub x: Tensor,
    pub concepts: Tensor,
    pub labels: Vec<usize>,
    pub noise: Noise,
    pub noise_seed: u64,
}

pub fn tiny_case(variant: Variant, seed: u64) -> TinyCase {
    let mut rng = RandomStream::derive(seed, &[77]);
    let features = 2 + rng.below(3);
    let c = 2 + rng.below(3);
    let rows = 2 + rng.below(3);
    let batch_norm = rng.below(2) == 1;
    let cfg = TrainConfig {
        hidden: 2 + rng.below(7),
        depth: 1 + rng.below(2),
        mc_samples: 1 + rng.below(3),
        batch_norm,
        dropout: if rng.below(2) == 1 { 0.2 } else { 0.0 },
        tau: 0.5 + 1.5 * rng.uniform(),
        lambda1: 0.5 + rng.uniform(),
        lambda2: Some(2.0 * rng.uniform()),
        penalty: if rng.below(2) == 1 {
            PenaltyKind::Absolute
        } else {
            PenaltyKind::Signed
        },
        bottleneck: Bottleneck::Relaxed,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(variant, features, c, &cfg).unwrap();
    // Zero biases put units with all-dead inputs exactly on the ReLU kink.
    for e in model.params.entries_mut() {
        if e.name.ends_with(".b") {
            e.value.data_mut().iter_mut().for_each(|b| *b = 0.5 * rng.normal());
        }
    }
    if variant == Variant::Global {
        let l = DMatrix::from_fn(c, c, |i, j| {
            if i == j {
                0.5 + rng.uniform()
            } else if i > j {
                0.5 * rng.normal()
            } else {
                0.0
            }
        });
        model.set_global_cholesky(&l).unwrap();
    }
    let x = Tensor::from_vec(rows, features, (0..rows * features).map(|_| rng.normal()).collect());
    let concepts = Tensor::from_vec(rows, c, (0..rows * c).map(|_| rng.below(2) as f64).collect());
    let labels = (0..rows).map(|_| rng.below(2)).collect();
    let noise = Noise::draw(rows, cfg.mc_samples, c, &mut rng);
    TinyCase {
        model,
        cfg,
        x,
        concepts,
        labels,
        noise,
        noise_seed: seed ^ 0x5eed,
    }
}

impl TinyCase {
    /// Max relative finite-difference error of the total loss over all
    /// trainable coordinates.
    pub fn grad_error(&self) -> f64 {
        let loss = |p: &scbm::nn::ParamStore| {
            let mut rng = RandomStream::new(self.noise_seed);
            let (v, g, _) = self.model.loss_and_grad(
                p,
                &self.x,
                &self.concepts,
                &self.labels,
                &self.cfg,
                &self.noise,
                Mode::Train,
                &mut rng,
            )?;
            Ok((v, g))
        };
        let mut rng = RandomStream::new(0);
        scbm::nn::grad_check(&self.model.params, loss, 1e-5, None, &mut rng).unwrap()
    }
}

/// Quantiles from standard published χ² tables, `(dof, level, value)`.
pub const CHI2_TABLE: [(usize, f64, f64); 12] = [
    (1, 0.90, 2.706),
    (1, 0.95, 3.841),
    (1, 0.99, 6.635),
    (2, 0.90, 4.605),
    (2, 0.95, 5.991),
    (2, 0.99, 9.210),
    (5, 0.90, 9.236),
    (5, 0.95, 11.070),
    (5, 0.99, 15.086),
    (10, 0.90, 15.987),
    (10, 0.95, 18.307),
    (10, 0.99, 23.209),
];

/// The 2×2 metric fixture: probabilities, concepts (row-major).
pub const FIXTURE_P: [f64; 4] = [0.6, 0.4, 0.2, 0.9];
pub const FIXTURE_C: [f64; 4] = [1.0, 0.0, 1.0, 1.0];
