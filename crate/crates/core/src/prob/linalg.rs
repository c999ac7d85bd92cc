//! Small dense linear-algebra helpers built around lower-triangular factors.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{AssimError, Result};

/// Smallest relative jitter tried when a factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Result of a jittered factorization: `C + jitter·I = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Factor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with the jitter ladder: on failure add
/// `1e-10·tr(C)/d·I`, escalating by ×10 up to `1e-4·tr(C)/d`.
pub fn cholesky_jittered(c: &DMatrix<f64>, context: &str) -> Result<Factor> {
    if !c.is_square() {
        return Err(AssimError::InvalidArgument(format!(
            "{context}: covariance is {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(AssimError::NumericalDegeneracy(format!(
            "{context}: non-finite covariance entry"
        )));
    }
    let d = c.nrows();
    let mut sym = c.clone();
    symmetrize(&mut sym);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok(Factor {
            lower: ch.l(),
            jitter: 0.0,
        });
    }
    let mut scale = sym.trace() / d.max(1) as f64;
    if !(scale > 0.0) {
        scale = 1.0;
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut trial = sym.clone();
        for i in 0..d {
            trial[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(trial) {
            return Ok(Factor {
                lower: ch.l(),
                jitter,
            });
        }
        rel *= 10.0;
    }
    Err(AssimError::NotPositiveDefinite {
        context: context.to_string(),
        max_jitter: JITTER_MAX * scale,
    })
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `L·X = B` column by column.
pub fn solve_lower_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = b.clone();
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = out[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * out[(k, c)];
            }
            out[(i, c)] = s / l[(i, i)];
        }
    }
    out
}

/// `(L·Lᵀ)⁻¹·b` via two triangular solves.
pub fn solve_spd(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Explicit inverse of `L·Lᵀ`.
pub fn spd_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = solve_lower_mat(l, &DMatrix::identity(n, n));
    linv.transpose() * linv
}

/// `log|L·Lᵀ| = 2·Σ log L_ii`.
pub fn log_det(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `L·Lᵀ`.
pub fn outer_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    l * l.transpose()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular() {
        // rank-1
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let c = &v * v.transpose();
        let f = cholesky_jittered(&c, "test").unwrap();
        assert!(f.jitter > 0.0);
        assert!(f.jitter <= JITTER_MAX * c.trace() / 3.0 * 1.0001);
        assert!((0..3).all(|i| f.lower[(i, i)] > 0.0));
    }

    #[test]
    fn indefinite_fails() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_jittered(&c, "x"),
            Err(AssimError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let c = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(cholesky_jittered(&c, "x").is_err());
    }

    #[test]
    fn solves_agree_with_inverse() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = cholesky_jittered(&c, "x").unwrap();
        assert_eq!(f.jitter, 0.0);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = solve_spd(&f.lower, &b);
        let direct = c.clone().try_inverse().unwrap() * &b;
        assert!((x - direct).norm() < 1e-12);
        let inv = spd_inverse(&f.lower);
        assert!((inv * &c - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!((log_det(&f.lower) - c.determinant().ln()).abs() < 1e-12);
    }
}
