//! Likelihood maximization inside a Gaussian confidence region.
//!
//! With `K` the Cholesky factor of `Σ_SS` and whitened offsets
//! `w = K⁻¹(η_S − μ_S)`, the likelihood-ratio region is the ball
//! `‖w‖² ≤ χ²_{d,level}` and the sign constraints `sᵢ(η_i − μ_i) ≥ 0` form
//! the polyhedral cone `D_s K w ≥ 0`. Euclidean projection onto a cone
//! intersected with an origin-centred ball is the cone projection scaled
//! back into the ball, and the cone projection reduces to a non-negative
//! quadratic program in `D_s Σ_SS D_s`, so no inverse is ever formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{chi2_quantile, sigmoid, ConceptDistribution};
use crate::nn::tape::logsumexp;

const ARMIJO: f64 = 1e-4;
const MEMORY: usize = 10;
const STEP_MIN: f64 = 1e-10;
const STEP_MAX: f64 = 1e10;

/// Solver outcome for one intervention set.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSolution {
    /// Optimized logits `η′_S`, aligned with the intervention set.
    pub eta: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit; `eta` is then the best feasible iterate.
    pub converged: bool,
    /// Squared radius `χ²_{|S|, level}`.
    pub radius2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

/// `Σ_i log σ(s_i η_i)` where `s_i = ±1` encodes the target value.
pub fn log_likelihood(eta: &[f64], signs: &[f64]) -> f64 {
    eta.iter()
        .zip(signs)
        .map(|(&e, &s)| -logsumexp(&[0.0, -s * e]))
        .sum()
}

/// Maximizes the Bernoulli log-likelihood of `values` over `η_S` subject to
/// the `level` likelihood-ratio region of the marginal `N(μ_S, Σ_SS)` and the
/// sign constraints. `marginal` is that marginal distribution.
pub fn solve_region(
    marginal: &ConceptDistribution,
    values: &[f64],
    level: f64,
    opts: SolverOptions,
) -> Result<RegionSolution> {
    let d = marginal.dim();
    if values.len() != d {
        return Err(Error::Usage(format!(
            "{} values for a {d}-dimensional region",
            values.len()
        )));
    }
    let radius2 = chi2_quantile(d, level)?;
    let radius = radius2.sqrt();
    let signs: Vec<f64> = values
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { -1.0 })
        .collect();
    let mu = marginal.mean().clone();
    let k = marginal.chol().clone();
    let sigma = marginal.covariance();
    let m = DMatrix::from_fn(d, d, |i, j| signs[i] * signs[j] * sigma[(i, j)]);
    let a = DMatrix::from_fn(d, d, |i, j| signs[i] * k[(i, j)]);

    let eta_of = |w: &DVector<f64>| -> DVector<f64> { &mu + &k * w };
    let f_of = |w: &DVector<f64>| log_likelihood(eta_of(w).as_slice(), &signs);
    let grad_of = |w: &DVector<f64>| -> DVector<f64> {
        let eta = eta_of(w);
        let g = DVector::from_iterator(
            d,
            eta.iter()
                .zip(&signs)
                .map(|(&e, &s)| s * sigmoid(-s * e)),
        );
        k.transpose() * g
    };
    let project = |v: &DVector<f64>| -> DVector<f64> {
        let q = &a * v;
        let lambda = nonneg_qp(&m, &q);
        let mut w = v + a.transpose() * lambda;
        let norm = w.norm();
        if norm > radius {
            w *= radius / norm;
        }
        w
    };

    // Spectral projected gradient ascent: Barzilai-Borwein steps with a
    // nonmonotone Armijo test against the best of the last MEMORY values.
    let mut w = DVector::zeros(d);
    let mut f = f_of(&w);
    let mut g = grad_of(&w);
    let mut recent = std::collections::VecDeque::from([f]);
    let mut t = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let mapping = (&w - project(&(&w + &g))).norm();
        if mapping <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = project(&(&w + &g * t)) - &w;
        let slope = g.dot(&dir);
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::min);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &w + &dir * alpha;
            let fc = f_of(&cand);
            if fc >= reference + ARMIJO * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, f_next)) = accepted else {
            // No representable ascent step remains.
            converged = mapping <= opts.tol.sqrt();
            break;
        };
        let g_next = grad_of(&next);
        let step = &next - &w;
        let curvature = -step.dot(&(&g_next - &g));
        t = if curvature > 0.0 {
            (step.norm_squared() / curvature).clamp(STEP_MIN, STEP_MAX)
        } else {
            STEP_MAX
        };
        w = next;
        f = f_next;
        g = g_next;
        recent.push_back(f);
        if recent.len() > MEMORY {
            recent.pop_front();
        }
    }

    let mut eta: Vec<f64> = eta_of(&w).iter().copied().collect();
    for ((e, &m0), &s) in eta.iter_mut().zip(mu.iter()).zip(&signs) {
        if s * (*e - m0) < 0.0 {
            *e = m0;
        }
    }
    let offset = DVector::from_iterator(d, eta.iter().zip(mu.iter()).map(|(e, m0)| e - m0));
    let stat = crate::gauss::lr_statistic(&(&mu + &offset), &mu, &k);
    if stat > radius2 {
        let scale = (radius2 / stat).sqrt();
        for (e, &m0) in eta.iter_mut().zip(mu.iter()) {
            *e = m0 + (*e - m0) * scale;
        }
    }
    Ok(RegionSolution {
        eta,
        iterations,
        converged,
        radius2,
    })
}

/// Active-set solution of `min ½λᵀMλ + qᵀλ` subject to `λ ≥ 0` for
/// positive-definite `M`.
pub fn nonneg_qp(m: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
    let n = q.len();
    let scale = m.diagonal().max().max(1.0) * q.amax().max(1.0);
    let tol = 1e-13 * scale;
    let mut lambda = DVector::zeros(n);
    let mut passive = vec![false; n];
    for _ in 0..3 * n + 10 {
        let grad = m * &lambda + q;
        let mut enter = None;
        let mut most = -tol;
        for i in 0..n {
            if !passive[i] && grad[i] < most {
                most = grad[i];
                enter = Some(i);
            }
        }
        let Some(j) = enter else {
            break;
        };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z = solve_subsystem(m, q, &idx);
            if idx.iter().zip(z.iter()).all(|(_, &zi)| zi > 0.0) {
                lambda.fill(0.0);
                for (&i, &zi) in idx.iter().zip(z.iter()) {
                    lambda[i] = zi;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                if zi <= 0.0 {
                    let denom = lambda[i] - zi;
                    if denom > 0.0 {
                        alpha = alpha.min(lambda[i] / denom);
                    }
                }
            }
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                lambda[i] += alpha * (zi - lambda[i]);
            }
            for &i in &idx {
                if lambda[i] <= tol * 1e-3 {
                    lambda[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    lambda
}

fn solve_subsystem(m: &DMatrix<f64>, q: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| m[(idx[a], idx[b])]);
    let rhs = DVector::from_iterator(k, idx.iter().map(|&i| -q[i]));
    match sub.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => sub
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DVector::zeros(k)),
    }
}
