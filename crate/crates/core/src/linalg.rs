//! Dense matrix helpers: pseudoinverse and ridge solves. Matrices are `nalgebra`
//! types; the SVD comes from `faer`, whose decomposition is the more reliable one on
//! rank-deficient input.

use nalgebra::DMatrix;

use crate::error::{PbpError, Result};

/// Relative cutoff for singular values: `max(rows, cols) * eps`, scaled by the largest one.
pub fn default_rtol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// Moore-Penrose pseudoinverse.
///
/// Matrices whose columns are exactly mutually orthogonal (permutations, diagonal and
/// one-hot reshaping matrices) are inverted column by column, which keeps the result
/// exact. Everything else goes through a thin SVD; singular values at or below
/// `rtol * sigma_max` are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PbpError::NonFinite);
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    if let Some(p) = pinv_orthogonal_columns(m, rtol) {
        return Ok(p);
    }
    Ok(pinv_svd(m, rtol)?.0)
}

/// Thin SVD via `faer`. Returns `(U, singular values, V)`.
fn thin_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let a = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let svd = a.thin_svd().map_err(|e| PbpError::Internal(format!("svd failed: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let k = s.nrows();
    Ok((
        DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, j)]),
        (0..k).map(|i| s[i]).collect(),
        DMatrix::from_fn(v.nrows(), k, |i, j| v[(i, j)]),
    ))
}

/// Pseudoinverse through the SVD, together with the numerical rank.
fn pinv_svd(m: &DMatrix<f64>, rtol: f64) -> Result<(DMatrix<f64>, usize)> {
    let (u, sv, v) = thin_svd(m)?;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (k, &s) in sv.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / s;
        for i in 0..cols {
            let vi = v[(i, k)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] += vi * u[(j, k)];
            }
        }
    }
    Ok((out, rank))
}

fn pinv_orthogonal_columns(m: &DMatrix<f64>, rtol: f64) -> Option<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    let mut norms = vec![0.0; cols];
    for a in 0..cols {
        let ca = m.column(a);
        norms[a] = ca.dot(&ca);
        for b in (a + 1)..cols {
            if ca.dot(&m.column(b)) != 0.0 {
                return None;
            }
        }
    }
    let sigma_max_sq = norms.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    for a in 0..cols {
        let n = norms[a];
        if n == 0.0 || n.sqrt() <= rtol * sigma_max_sq.sqrt() {
            continue;
        }
        for j in 0..rows {
            let v = m[(j, a)];
            if v != 0.0 {
                out[(a, j)] = v / n;
            }
        }
    }
    Some(out)
}

/// Solves `(gram + lambda I) X = rhs` for symmetric positive semi-definite `gram`.
///
/// With `lambda > 0` a Cholesky factorization is used. With `lambda == 0` the
/// minimum-norm solution `pinv(gram) rhs` is returned and `rank_deficient` reports
/// whether any direction was dropped.
pub fn ridge_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PbpError::InvalidInput(format!("ridge penalty {lambda} must be finite and >= 0")));
    }
    let p = gram.nrows();
    if lambda > 0.0 {
        let mut a = gram.clone();
        for i in 0..p {
            a[(i, i)] += lambda;
        }
        if let Some(chol) = a.clone().cholesky() {
            return Ok(RidgeSolution { coefficients: chol.solve(rhs), rank_deficient: false });
        }
        // Cholesky can only fail here through rounding; fall back to the SVD route.
        let inv = pinv(&a, default_rtol(p, p))?;
        return Ok(RidgeSolution { coefficients: inv * rhs, rank_deficient: false });
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(PbpError::NonFinite);
    }
    if p == 0 {
        return Ok(RidgeSolution { coefficients: DMatrix::zeros(0, rhs.ncols()), rank_deficient: false });
    }
    let (inv, rank) = pinv_svd(gram, default_rtol(p, p))?;
    Ok(RidgeSolution { coefficients: inv * rhs, rank_deficient: rank < p })
}

#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub coefficients: DMatrix<f64>,
    pub rank_deficient: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_deficient_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv(&m, default_rtol(2, 2)).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn pinv_of_dense_matrix_inverts() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = pinv(&m, default_rtol(2, 2)).unwrap();
        let id = &m * &p;
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn ridge_zero_penalty_is_least_squares() {
        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let rhs = DMatrix::from_row_slice(2, 1, &[2.0, 8.0]);
        let sol = ridge_solve(&gram, &rhs, 0.0).unwrap();
        assert!(!sol.rank_deficient);
        assert_eq!(sol.coefficients, DMatrix::from_row_slice(2, 1, &[1.0, 2.0]));
    }

    #[test]
    fn ridge_flags_rank_deficiency() {
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let rhs = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let sol = ridge_solve(&gram, &rhs, 0.0).unwrap();
        assert!(sol.rank_deficient);
        assert!((sol.coefficients[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_rejected() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(pinv(&m, 1e-12), Err(PbpError::NonFinite)));
    }
}
