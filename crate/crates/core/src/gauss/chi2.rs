use statrs::function::gamma::checked_gamma_lr;

use crate::error::{Error, Result};

/// Absolute tolerance on the returned quantile.
const QUANTILE_TOL: f64 = 1e-10;

/// χ² CDF via the regularized lower incomplete gamma function `P(d/2, x/2)`.
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    checked_gamma_lr(dof as f64 / 2.0, x / 2.0).unwrap_or(f64::NAN)
}

/// Inverse χ² CDF by bracketed bisection on [`chi2_cdf`].
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Usage("chi-square degrees of freedom must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Usage(format!("quantile level {level} is outside (0, 1)")));
    }
    let mut lo = 0.0;
    let mut hi = (dof as f64).max(1.0);
    while chi2_cdf(dof, hi) < level {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > QUANTILE_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dof_closed_form() {
        // For d = 2 the CDF is 1 - exp(-x/2).
        let q = chi2_quantile(2, 0.95).unwrap();
        assert!((q - (-2.0 * 0.05f64.ln())).abs() < 1e-8);
        assert!((q - 5.9915).abs() < 1e-4);
    }

    #[test]
    fn one_dof_99_percent() {
        assert!((chi2_quantile(1, 0.99).unwrap() - 6.6349).abs() < 1e-4);
    }

    #[test]
    fn monotone_in_dof_and_level() {
        let levels = [0.5, 0.9, 0.95, 0.99, 0.999];
        for d in 1..12 {
            for w in levels.windows(2) {
                assert!(chi2_quantile(d, w[0]).unwrap() < chi2_quantile(d, w[1]).unwrap());
            }
            assert!(chi2_quantile(d, 0.9).unwrap() < chi2_quantile(d + 1, 0.9).unwrap());
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(1, 1.0).is_err());
        assert!(chi2_quantile(1, 0.0).is_err());
    }
}
