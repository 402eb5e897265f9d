use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::cholesky::cholesky_factor;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Gaussian over concept logits, `η ~ N(μ, L·Lᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDistribution {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl ConceptDistribution {
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.nrows() != d || chol.ncols() != d {
            return Err(Error::Config(format!(
                "mean has {d} entries but Cholesky factor is {}x{}",
                chol.nrows(),
                chol.ncols()
            )));
        }
        for i in 0..d {
            if !(chol[(i, i)] > 0.0) {
                return Err(Error::Config(format!("Cholesky diagonal {i} is not positive")));
            }
            for j in i + 1..d {
                if chol[(i, j)] != 0.0 {
                    return Err(Error::Config(format!(
                        "Cholesky factor has a non-zero entry above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        if !mean.iter().chain(chol.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("distribution has non-finite entries".into()));
        }
        Ok(Self { mean, chol })
    }

    pub fn from_covariance(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_factor(cov)?;
        Self::new(mean, chol)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.chol.row(i).iter().map(|v| v * v).sum())
            .collect()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_from_covariance(&self.covariance())
    }

    /// `μ + L·ε` for a caller-supplied standard-normal vector.
    pub fn sample_with(&self, eps: &[f64]) -> DVector<f64> {
        assert_eq!(eps.len(), self.dim(), "noise length mismatch");
        let mut eta = self.mean.clone();
        for i in 0..self.dim() {
            let row = self.chol.row(i);
            let mut acc = 0.0;
            for (j, e) in eps.iter().enumerate().take(i + 1) {
                acc += row[j] * e;
            }
            eta[i] += acc;
        }
        eta
    }

    pub fn sample(&self, rng: &mut RandomStream) -> DVector<f64> {
        let eps = rng.normals(self.dim());
        self.sample_with(&eps)
    }

    pub fn log_density(&self, eta: &DVector<f64>) -> f64 {
        log_density(eta, &self.mean, &self.chol)
    }

    /// Marginal over the listed coordinates, in the given order.
    pub fn marginal(&self, idx: &[usize]) -> Result<ConceptDistribution> {
        let sigma = self.covariance();
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| sigma[(idx[a], idx[b])]);
        ConceptDistribution::from_covariance(mean, &block)
    }
}

/// Reparameterized draw `η = μ + L·ε`, `ε ~ N(0, I)` taken from `rng`.
pub fn sample_reparam(dist: &ConceptDistribution, rng: &mut RandomStream) -> DVector<f64> {
    dist.sample(rng)
}

/// `Σᵢⱼ / √(Σᵢᵢ Σⱼⱼ)` with an exact unit diagonal.
pub fn correlation_from_covariance(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let sd: Vec<f64> = (0..n).map(|i| sigma[(i, i)].sqrt()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            sigma[(a, b)] / (sd[a] * sd[b])
        }
    })
}

fn whitened_norm_sq(diff: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let z = l
        .solve_lower_triangular(diff)
        .expect("Cholesky factor with positive diagonal is invertible");
    z.norm_squared()
}

/// Multivariate-normal log density with `log|Σ| = 2·Σᵢ log Lᵢᵢ`.
pub fn log_density(eta: &DVector<f64>, mu: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let d = mu.len();
    assert_eq!(eta.len(), d, "dimension mismatch");
    let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
    -0.5 * (d as f64 * (2.0 * PI).ln() + log_det + whitened_norm_sq(&(eta - mu), l))
}

/// Likelihood-ratio statistic `−2(log p(η) − log p(μ))`, which for a
/// Gaussian is the squared Mahalanobis distance of `η` from `μ`.
pub fn lr_statistic(eta_s: &DVector<f64>, mu_s: &DVector<f64>, l_ss: &DMatrix<f64>) -> f64 {
    assert_eq!(eta_s.len(), mu_s.len(), "dimension mismatch");
    whitened_norm_sq(&(eta_s - mu_s), l_ss)
}

/// Distribution of the non-intervened logits given fixed values on `S`.
#[derive(Clone, Debug)]
pub struct ConditionalResult {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    /// Original concept index of each remaining coordinate, ascending.
    pub remaining: Vec<usize>,
}

impl ConditionalResult {
    pub fn distribution(&self) -> Result<ConceptDistribution> {
        ConceptDistribution::new(self.mean.clone(), self.chol.clone())
    }
}

fn validate_subset(dim: usize, s: &[usize]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Usage("conditioning set is empty".into()));
    }
    let mut seen = vec![false; dim];
    for &i in s {
        if i >= dim {
            return Err(Error::Usage(format!("concept index {i} out of range 0..{dim}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Usage(format!("concept index {i} listed twice")));
        }
    }
    if s.len() == dim {
        return Err(Error::Usage(
            "conditioning on every concept leaves nothing to condition".into(),
        ));
    }
    Ok(())
}

/// Conditions `dist` on `η_S = eta_s`:
///
/// ```text
/// μ̄ = μ_R + Σ_RS Σ_SS⁻¹ (η'_S − μ_S)
/// Σ̄ = Σ_RR − Σ_RS Σ_SS⁻¹ Σ_SR
/// ```
///
/// where `R` is the complement of `S`. `Σ_SS` is only ever used through its
/// Cholesky factor.
pub fn condition(
    dist: &ConceptDistribution,
    s: &[usize],
    eta_s: &[f64],
) -> Result<ConditionalResult> {
    let dim = dist.dim();
    validate_subset(dim, s)?;
    if eta_s.len() != s.len() {
        return Err(Error::Usage(format!(
            "{} intervention logits for {} intervened concepts",
            eta_s.len(),
            s.len()
        )));
    }
    if !eta_s.iter().all(|v| v.is_finite()) {
        return Err(Error::Usage("intervention logits must be finite".into()));
    }
    let mut in_s = vec![false; dim];
    for &i in s {
        in_s[i] = true;
    }
    let remaining: Vec<usize> = (0..dim).filter(|&i| !in_s[i]).collect();
    let sigma = dist.covariance();
    let mu = dist.mean();

    let sigma_ss = DMatrix::from_fn(s.len(), s.len(), |a, b| sigma[(s[a], s[b])]);
    let sigma_sr = DMatrix::from_fn(s.len(), remaining.len(), |a, b| {
        sigma[(s[a], remaining[b])]
    });
    let sigma_rr = DMatrix::from_fn(remaining.len(), remaining.len(), |a, b| {
        sigma[(remaining[a], remaining[b])]
    });
    let shift = DVector::from_iterator(s.len(), s.iter().zip(eta_s).map(|(&i, &e)| e - mu[i]));

    let k = cholesky_factor(&sigma_ss)?;
    let solve = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
        let y = k
            .solve_lower_triangular(rhs)
            .expect("positive-diagonal factor");
        k.tr_solve_lower_triangular(&y)
            .expect("positive-diagonal factor")
    };
    let weights = solve(&DMatrix::from_column_slice(shift.len(), 1, shift.as_slice()));
    let gain = solve(&sigma_sr); // Σ_SS⁻¹ Σ_SR

    let mu_r = DVector::from_iterator(remaining.len(), remaining.iter().map(|&i| mu[i]));
    let mean = mu_r + sigma_sr.transpose() * weights.column(0);
    let mut cov = sigma_rr - sigma_sr.transpose() * gain;
    // Symmetrize away rounding asymmetry.
    let n = cov.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let chol = cholesky_factor(&cov)?;
    Ok(ConditionalResult {
        mean,
        cov,
        chol,
        remaining,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_pd(dim: usize, rng: &mut RandomStream) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    }

    #[test]
    fn diagonal_covariance_makes_conditioning_a_no_op() {
        let mu = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.5]));
        let d = ConceptDistribution::from_covariance(mu, &cov).unwrap();
        let r = condition(&d, &[1], &[7.0]).unwrap();
        assert_eq!(r.remaining, vec![0, 2]);
        assert!((r.mean[0] - 0.3).abs() < 1e-15 && (r.mean[1] - 2.0).abs() < 1e-15);
        assert!((r.cov[(0, 0)] - 1.0).abs() < 1e-15 && (r.cov[(1, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(r.cov[(0, 1)], 0.0);
    }

    #[test]
    fn bivariate_closed_form() {
        for &(rho, a) in &[(0.5, 1.0), (-0.8, 2.5), (0.9, -0.3)] {
            let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let d = ConceptDistribution::from_covariance(DVector::zeros(2), &cov).unwrap();
            let r = condition(&d, &[0], &[a]).unwrap();
            assert!((r.mean[0] - rho * a).abs() < 1e-12);
            assert!((r.cov[(0, 0)] - (1.0 - rho * rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_conditioning_equals_joint() {
        let mut rng = RandomStream::new(11);
        let cov = random_pd(5, &mut rng);
        let mu = DVector::from_fn(5, |_, _| rng.normal());
        let d = ConceptDistribution::from_covariance(mu, &cov).unwrap();
        let (a, b) = (0.7, -1.3);
        let joint = condition(&d, &[1, 2], &[a, b]).unwrap();
        let first = condition(&d, &[1], &[a]).unwrap();
        // coordinate 2 sits at position 1 of remaining [0, 2, 3, 4]
        let second = condition(&first.distribution().unwrap(), &[1], &[b]).unwrap();
        assert!((joint.mean.clone() - second.mean).abs().max() < 1e-10);
        assert!((joint.cov.clone() - second.cov).abs().max() < 1e-10);
    }

    #[test]
    fn conditioning_contract_errors() {
        let d = ConceptDistribution::from_covariance(DVector::zeros(2), &DMatrix::identity(2, 2))
            .unwrap();
        assert!(matches!(condition(&d, &[0, 1], &[0.0, 0.0]), Err(Error::Usage(_))));
        assert!(matches!(condition(&d, &[], &[]), Err(Error::Usage(_))));
        assert!(matches!(condition(&d, &[0, 0], &[0.0, 0.0]), Err(Error::Usage(_))));
        assert!(matches!(condition(&d, &[2], &[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn standard_normal_mode_density() {
        let v = log_density(
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
        );
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn lr_statistic_examples() {
        let l = DMatrix::from_element(1, 1, 1.0);
        let mu = DVector::from_vec(vec![0.5]);
        assert_eq!(lr_statistic(&mu, &mu, &l), 0.0);
        assert!((lr_statistic(&DVector::from_vec(vec![2.5]), &mu, &l) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_factor_samples_collapse_to_mean() {
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let l = DMatrix::identity(3, 3) * 1e-6;
        let d = ConceptDistribution::new(mu.clone(), l).unwrap();
        let mut rng = RandomStream::new(3);
        for _ in 0..100 {
            assert!((d.sample(&mut rng) - &mu).abs().max() < 1e-5);
        }
        assert_eq!(d.sample_with(&[0.0, 0.0, 0.0]), mu);
    }

    #[test]
    fn rejects_upper_triangular_entries() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ConceptDistribution::new(DVector::zeros(2), l).is_err());
    }
}
