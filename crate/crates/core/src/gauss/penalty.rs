use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// How off-diagonal precision entries are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    /// `Σ_{i≠j} (Σ⁻¹)ᵢⱼ`, the plain signed sum.
    #[default]
    Signed,
    /// `Σ_{i≠j} |(Σ⁻¹)ᵢⱼ|`, the graphical-lasso style ℓ₁ variant.
    Absolute,
}

/// `Σ⁻¹ = L⁻ᵀ L⁻¹`, built column by column with two triangular solves.
pub fn precision_matrix(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = nalgebra::DVector::zeros(n);
        e[j] = 1.0;
        let y = l.solve_lower_triangular(&e).expect("positive-diagonal factor");
        let col = l.tr_solve_lower_triangular(&y).expect("positive-diagonal factor");
        p.set_column(j, &col);
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    p
}

pub fn precision_offdiag_penalty(l: &DMatrix<f64>, kind: PenaltyKind) -> f64 {
    offdiag_sum(&precision_matrix(l), kind)
}

fn offdiag_sum(p: &DMatrix<f64>, kind: PenaltyKind) -> f64 {
    let n = p.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += match kind {
                    PenaltyKind::Signed => p[(i, j)],
                    PenaltyKind::Absolute => p[(i, j)].abs(),
                };
            }
        }
    }
    s
}

/// Penalty value and its gradient with respect to the lower-triangular
/// entries of `L` (upper entries of the returned matrix are zero).
///
/// With `P = Σ⁻¹` and `G = ∂penalty/∂P`: `∂/∂Σ = −P G P` and, as `Σ = L Lᵀ`,
/// `∂/∂L = (∂/∂Σ + ∂/∂Σᵀ) L`.
pub fn precision_offdiag_penalty_grad(
    l: &DMatrix<f64>,
    kind: PenaltyKind,
) -> (f64, DMatrix<f64>) {
    let n = l.nrows();
    let p = precision_matrix(l);
    let value = offdiag_sum(&p, kind);
    let g = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            match kind {
                PenaltyKind::Signed => 1.0,
                PenaltyKind::Absolute => {
                    let v = p[(i, j)];
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            }
        }
    });
    let d_sigma = -(&p * g * &p);
    let mut d_l = (&d_sigma + d_sigma.transpose()) * l;
    for i in 0..n {
        for j in i + 1..n {
            d_l[(i, j)] = 0.0;
        }
    }
    (value, d_l)
}
