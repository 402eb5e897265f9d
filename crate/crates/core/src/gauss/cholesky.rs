use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Smallest value a Cholesky diagonal entry can take.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Ridge added to a covariance block whose factorization failed.
pub const JITTER: f64 = 1e-9;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^{-y})
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Position of entry `(i, j)`, `j <= i`, in the packed row-major lower triangle.
#[inline]
pub fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

pub fn dim_from_tri_len(len: usize) -> Option<usize> {
    let mut d = 0;
    while tri_len(d) < len {
        d += 1;
    }
    (tri_len(d) == len).then_some(d)
}

/// Maps an unconstrained packed lower triangle to a valid Cholesky factor.
///
/// Off-diagonal entries are copied; diagonal entries go through
/// `softplus(·) + DIAG_FLOOR`.
pub fn build_cholesky(raw: &[f64]) -> Result<DMatrix<f64>> {
    let dim = dim_from_tri_len(raw.len()).ok_or_else(|| {
        Error::Config(format!(
            "{} raw Cholesky parameters is not a triangular number",
            raw.len()
        ))
    })?;
    let mut l = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..i {
            l[(i, j)] = raw[tri_index(i, j)];
        }
        l[(i, i)] = softplus(raw[tri_index(i, i)]) + DIAG_FLOOR;
    }
    Ok(l)
}

/// Inverse of [`build_cholesky`].
pub fn raw_from_cholesky(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let dim = l.nrows();
    if l.ncols() != dim {
        return Err(Error::Config("Cholesky factor must be square".into()));
    }
    let mut raw = vec![0.0; tri_len(dim)];
    for i in 0..dim {
        for j in 0..i {
            raw[tri_index(i, j)] = l[(i, j)];
        }
        let d = l[(i, i)] - DIAG_FLOOR;
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Config(format!(
                "diagonal entry {i} ({}) is not representable above the floor",
                l[(i, i)]
            )));
        }
        raw[tri_index(i, i)] = inverse_softplus(d);
    }
    Ok(raw)
}

/// Lower Cholesky factor of a symmetric matrix.
///
/// On failure, retries once with `JITTER·I` added; a second failure is a
/// linear-algebra error.
pub fn cholesky_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::LinAlg("covariance block is not square".into()));
    }
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch.l());
    }
    let n = sigma.nrows();
    let jittered = sigma + DMatrix::<f64>::identity(n, n) * JITTER;
    jittered.cholesky().map(|ch| ch.l()).ok_or_else(|| {
        Error::LinAlg(format!(
            "{n}x{n} covariance block is not positive definite even after jitter {JITTER:e}"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_raw_zero_maps_to_ln_two() {
        let l = build_cholesky(&[0.0]).unwrap();
        assert!((l[(0, 0)] - (2f64.ln() + 1e-6)).abs() < 1e-15);
        assert!((l[(0, 0)] - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn large_negative_diagonal_stays_positive() {
        let l = build_cholesky(&[-800.0, 3.0, -1e6]).unwrap();
        assert!(l[(0, 0)] > 0.0 && l[(1, 1)] > 0.0);
        assert_eq!(l[(1, 0)], 3.0);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn raw_round_trip_reproduces_factor() {
        let l = DMatrix::from_row_slice(3, 3, &[1.3, 0.0, 0.0, -0.4, 0.7, 0.0, 2.0, 0.1, 0.05]);
        let raw = raw_from_cholesky(&l).unwrap();
        let back = build_cholesky(&raw).unwrap();
        assert!((back - l).abs().max() < 1e-12);
    }

    #[test]
    fn non_triangular_length_is_rejected() {
        assert!(build_cholesky(&[0.0, 1.0]).is_err());
        assert_eq!(dim_from_tri_len(10), Some(4));
        assert_eq!(dim_from_tri_len(0), Some(0));
    }

    #[test]
    fn jitter_rescues_semidefinite_block() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = cholesky_factor(&sigma).unwrap();
        assert!(l[(1, 1)] > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_factor(&bad), Err(Error::LinAlg(_))));
    }
}
