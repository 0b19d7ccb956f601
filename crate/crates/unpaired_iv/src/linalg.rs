//! Small dense linear-algebra helpers shared by the estimators and checkers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve `(g + ridge * I) x = rhs` for a symmetric PSD `g` via Cholesky.
///
/// Returns the solution together with the condition number of the ridged
/// matrix (ratio of extreme eigenvalues, reported in estimator diagnostics).
pub fn ridged_spd_solve(
    g: &DMatrix<f64>,
    ridge: f64,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let d = g.nrows();
    if g.ncols() != d || rhs.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "spd solve: g is {}x{}, rhs has length {}",
            g.nrows(),
            g.ncols(),
            rhs.len()
        )));
    }
    let mut a = symmetrize(g);
    for i in 0..d {
        a[(i, i)] += ridge;
    }
    let cond = spd_condition(&a);
    match a.clone().cholesky() {
        Some(chol) => {
            let x = chol.solve(rhs);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolveFailed("non-finite solution".into()));
            }
            Ok((x, cond))
        }
        None => {
            // Cholesky can fail for barely indefinite inputs; fall back to an
            // eigendecomposition-based pseudo solve of the ridged matrix.
            let eig = nalgebra::SymmetricEigen::new(a);
            let tol = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs())) * 1e-14;
            let mut y = eig.eigenvectors.transpose() * rhs;
            for (i, v) in y.iter_mut().enumerate() {
                let lam = eig.eigenvalues[i];
                if lam.abs() > tol {
                    *v /= lam;
                } else {
                    *v = 0.0;
                }
            }
            let x = &eig.eigenvectors * y;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolveFailed("singular ridged system".into()));
            }
            Ok((x, cond))
        }
    }
}

/// Invert `(g + ridge * I)` for symmetric PSD `g`.
pub fn ridged_spd_inverse(g: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let d = g.nrows();
    let mut a = symmetrize(g);
    for i in 0..d {
        a[(i, i)] += ridge;
    }
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SolveFailed("ridged matrix not positive definite".into()))
}

/// Ridged spectral inverse of a PSD variance matrix, used for weighting.
///
/// Eigendirections below the relative cutoff get weight zero instead of
/// 1/ridge. Centered one-hot moment variances are exactly singular along the
/// all-ones direction; the moment vector has no component there, so the
/// plain ridged inverse would amplify nothing but rounding noise by 1/ridge.
pub fn weight_inverse(omega: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(omega));
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let cutoff = (lam_max * 1e-12).max(ridge);
    let d = omega.nrows();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let lam = eig.eigenvalues[i];
        if lam >= cutoff {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() / (lam + ridge);
        }
    }
    out
}

/// Weight for a one-hot moment variance, whose only null direction is the
/// all-ones encoding redundancy. Deflating that direction with a bounded
/// shift keeps the matrix positive definite for a Cholesky inverse (O(m³/3)
/// and no eigenvector storage), and the moment vectors are orthogonal to it,
/// so the shift never touches the estimate.
pub fn weight_inverse_one_hot(omega: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let m = omega.nrows();
    let tau = (omega.trace() / m as f64).max(ridge) / m as f64;
    let mut a = symmetrize(omega);
    for r in 0..m {
        for c in 0..m {
            a[(r, c)] += tau;
        }
        a[(r, r)] += ridge;
    }
    a.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SolveFailed("moment variance not positive semidefinite".into()))
}

/// Condition number of a symmetric matrix (|λ|max / |λ|min).
pub fn spd_condition(a: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &v in eig.eigenvalues.iter() {
        let av = v.abs();
        lo = lo.min(av);
        hi = hi.max(av);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Minimum eigenvalue of the symmetrized matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v))
}

/// 0.5 * (A + Aᵀ); covariance constructions are symmetric up to rounding.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Numerical rank: number of singular values above `rel_tol * σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let svals = a.clone().singular_values();
    let smax = svals.iter().fold(0.0f64, |m, &v| m.max(v));
    if smax == 0.0 {
        return 0;
    }
    svals.iter().filter(|&&v| v > rel_tol * smax).count()
}

/// Minimum-norm least-squares solution of `a x = b` via SVD. Tall systems go
/// through the Gram pseudo-inverse (same solution, far cheaper than a full
/// SVD of the data matrix).
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() > 3 * a.ncols() {
        let gram = a.transpose() * a;
        let rhs = a.transpose() * b;
        let eig = nalgebra::SymmetricEigen::new(symmetrize(&gram));
        let lam_max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let cut = lam_max * 1e-12;
        let mut y = eig.eigenvectors.transpose() * rhs;
        for (i, v) in y.iter_mut().enumerate() {
            let lam = eig.eigenvalues[i];
            if lam > cut {
                *v /= lam;
            } else {
                *v = 0.0;
            }
        }
        return Ok(&eig.eigenvectors * y);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let eps = if smax > 0.0 { smax * 1e-13 } else { 0.0 };
    svd.solve(b, eps)
        .map_err(|e| Error::SolveFailed(e.to_string()))
}

/// Select the listed columns of `a` into a fresh matrix.
pub fn select_columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), cols.len());
    for (j, &c) in cols.iter().enumerate() {
        out.set_column(j, &a.column(c));
    }
    out
}

/// Select the listed entries of a vector.
pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Select the listed rows and columns of a square matrix.
pub fn select_submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), idx.len());
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            out[(r, c)] = a[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridged_solve_recovers_identity_system() {
        let g = DMatrix::<f64>::identity(3, 3);
        let rhs = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (x, cond) = ridged_spd_solve(&g, 1e-10, &rhs).unwrap();
        for i in 0..3 {
            assert!((x[i] - rhs[i]).abs() < 1e-8);
        }
        assert!(cond < 1.0 + 1e-9);
    }

    #[test]
    fn rank_detects_duplicate_columns() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 0.0, 0.0, 3.0]);
        assert_eq!(numerical_rank(&a, 1e-10), 2);
    }

    #[test]
    fn pinv_solve_minimum_norm() {
        // x + y = 2 has minimum-norm solution (1, 1).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let x = pinv_solve(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-10);
    }
}
