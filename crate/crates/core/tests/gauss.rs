mod common;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use scbm::gauss::{
    build_cholesky, cholesky_factor, condition, log_density, lr_statistic, tri_len,
    ConceptDistribution,
};
use scbm::rng::RandomStream;

use common::{dense_condition, random_spd, random_vector};

fn fixed_three_dim() -> ConceptDistribution {
    let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
    let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.6, 0.8, 0.0, -0.3, 0.4, 0.5]);
    ConceptDistribution::new(mean, l).unwrap()
}

#[test]
fn sample_moments_match_parameters() {
    let dist = fixed_three_dim();
    let mut rng = RandomStream::new(42);
    let n = 100_000;
    let draws: Vec<DVector<f64>> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let mean = draws.iter().fold(DVector::zeros(3), |acc, d| acc + d) / n as f64;
    let mut cov = DMatrix::zeros(3, 3);
    for d in &draws {
        let c = d - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    assert!((&mean - dist.mean()).amax() < 0.02, "mean {mean}");
    assert!((cov - dist.covariance()).norm() < 0.05);
}

#[test]
fn zero_noise_returns_the_mean() {
    let dist = fixed_three_dim();
    assert_eq!(dist.sample_with(&[0.0; 3]), *dist.mean());
}

/// `−½(d·ln 2π + ln det Σ + (η−μ)ᵀΣ⁻¹(η−μ))` through a dense inverse and determinant.
fn dense_log_density(eta: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let d = mu.len() as f64;
    let diff = eta - mu;
    let inv = sigma.clone().try_inverse().unwrap();
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (d * (2.0 * PI).ln() + sigma.determinant().ln() + quad)
}

#[test]
fn log_density_matches_dense_oracle() {
    let mut rng = RandomStream::new(3);
    for _ in 0..200 {
        let sigma = random_spd(4, &mut rng);
        let mu = random_vector(4, 1.0, &mut rng);
        let eta = random_vector(4, 2.0, &mut rng);
        let l = cholesky_factor(&sigma).unwrap();
        let got = log_density(&eta, &mu, &l);
        let want = dense_log_density(&eta, &mu, &sigma);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(log_density(&mu, &mu, &l) >= got);
    }
}

#[test]
fn lr_statistic_matches_quadratic_form() {
    let mut rng = RandomStream::new(4);
    for _ in 0..200 {
        let d = 1 + rng.below(6);
        let sigma = random_spd(d, &mut rng);
        let mu = random_vector(d, 1.0, &mut rng);
        let eta = random_vector(d, 2.0, &mut rng);
        let diff = &eta - &mu;
        let quad = (diff.transpose() * sigma.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let got = lr_statistic(&eta, &mu, &cholesky_factor(&sigma).unwrap());
        assert!((got - quad).abs() < 1e-10 * quad.max(1.0), "{got} vs {quad}");
    }
}

#[test]
fn conditioning_shrinks_marginal_variances() {
    let mut rng = RandomStream::new(5);
    for _ in 0..1200 {
        let c = 2 + rng.below(7);
        let sigma = random_spd(c, &mut rng);
        let mu = random_vector(c, 1.0, &mut rng);
        let dist = ConceptDistribution::from_covariance(mu, &sigma).unwrap();
        let mut idx: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut idx);
        let s = &idx[..1 + rng.below(c - 1)];
        let eta: Vec<f64> = s.iter().map(|_| 3.0 * rng.normal()).collect();
        let cond = condition(&dist, s, &eta).unwrap();
        for (k, &i) in cond.remaining.iter().enumerate() {
            assert!(cond.cov[(k, k)] <= sigma[(i, i)] + 1e-12);
        }
        let (mean, cov) = dense_condition(dist.mean(), &sigma, s, &eta);
        assert!((cond.mean - mean).amax() < 1e-8);
        assert!((cond.cov - cov).amax() < 1e-8);
    }
}

fn spd_strategy(max_dim: usize) -> impl Strategy<Value = (usize, u64)> {
    (2..=max_dim, any::<u64>())
}

proptest! {
    #[test]
    fn lr_statistic_is_zero_only_at_the_mean((d, seed) in spd_strategy(6), scale in 0.0f64..3.0) {
        let mut rng = RandomStream::new(seed);
        let l = cholesky_factor(&random_spd(d, &mut rng)).unwrap();
        let mu = random_vector(d, 1.0, &mut rng);
        prop_assert_eq!(lr_statistic(&mu, &mu, &l), 0.0);
        let dir = random_vector(d, 1.0, &mut rng);
        let stat = lr_statistic(&(&mu + dir * scale), &mu, &l);
        prop_assert!(stat >= 0.0);
        if scale > 1e-3 {
            prop_assert!(stat > 0.0);
        }
    }

    #[test]
    fn sequential_conditioning_equals_joint_for_any_partition((d, seed) in spd_strategy(8)) {
        let mut rng = RandomStream::new(seed);
        let sigma = random_spd(d, &mut rng);
        let dist = ConceptDistribution::from_covariance(random_vector(d, 1.0, &mut rng), &sigma).unwrap();
        let mut idx: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut idx);
        let s: Vec<usize> = idx[..1 + rng.below(d - 1)].to_vec();
        let eta: Vec<f64> = s.iter().map(|_| 2.0 * rng.normal()).collect();
        let joint = condition(&dist, &s, &eta).unwrap();

        // Split S at a random point and condition on the two parts in turn.
        let cut = rng.below(s.len() + 1);
        let (first, second) = (&s[..cut], &s[cut..]);
        let (mean, cov, remaining) = if first.is_empty() || second.is_empty() {
            (joint.mean.clone(), joint.cov.clone(), joint.remaining.clone())
        } else {
            let step1 = condition(&dist, first, &eta[..cut]).unwrap();
            let inner = step1.distribution().unwrap();
            let pos: Vec<usize> = second
                .iter()
                .map(|i| step1.remaining.iter().position(|r| r == i).unwrap())
                .collect();
            let step2 = condition(&inner, &pos, &eta[cut..]).unwrap();
            let remaining = step2.remaining.iter().map(|&k| step1.remaining[k]).collect();
            (step2.mean, step2.cov, remaining)
        };
        prop_assert_eq!(remaining, joint.remaining.clone());
        prop_assert!((mean - &joint.mean).amax() < 1e-10);
        prop_assert!((cov - &joint.cov).amax() < 1e-10);
    }

    #[test]
    fn built_factors_round_trip_through_covariance(d in 1usize..7, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed);
        let raw: Vec<f64> = (0..tri_len(d)).map(|_| rng.normal()).collect();
        let l = build_cholesky(&raw).unwrap();
        let sigma = &l * l.transpose();
        let back = cholesky_factor(&sigma).unwrap();
        prop_assert!((back - &l).amax() < 1e-8);
        prop_assert!(sigma.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }
}
