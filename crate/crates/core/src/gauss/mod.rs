//! Multivariate-normal machinery for concept logits.
//!
//! Covariances are always carried as lower-triangular Cholesky factors
//! `Σ = L·Lᵀ`. Quadratic forms and conditional moments use triangular
//! solves; the only place an explicit inverse is formed is the precision
//! penalty, whose value is defined entry-wise on `Σ⁻¹`.

mod chi2;
mod cholesky;
mod dist;
mod penalty;

pub use chi2::{chi2_cdf, chi2_quantile};
pub use cholesky::{
    build_cholesky, cholesky_factor, dim_from_tri_len, inverse_softplus, raw_from_cholesky,
    sigmoid, softplus, tri_index, tri_len, DIAG_FLOOR, JITTER,
};
pub use dist::{
    condition, correlation_from_covariance, log_density, lr_statistic, sample_reparam,
    ConceptDistribution, ConditionalResult,
};
pub use penalty::{
    precision_matrix, precision_offdiag_penalty, precision_offdiag_penalty_grad, PenaltyKind,
};
