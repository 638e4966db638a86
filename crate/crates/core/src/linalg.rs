//! Dense symmetric eigensolvers.
//!
//! The generalized problem `A e = v B e` with symmetric `A` and symmetric
//! positive definite `B` is reduced to a standard symmetric problem through
//! the Cholesky factor `B = L Lᵀ`:
//!
//! ```text
//! (L⁻¹ A L⁻ᵀ) y = v y,    e = L⁻ᵀ y
//! ```
//!
//! which yields eigenvectors normalized so that `eᵀ B e = 1`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Eigenpairs sorted ascending by eigenvalue; `vectors` holds one eigenvector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Symmetric eigendecomposition with ascending eigenvalues and a
/// reproducible sign convention: the first component of each eigenvector
/// whose magnitude exceeds `1e-12` is made positive.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> Result<EigenPairs> {
    check_dim("symmetric_eigen (square)", matrix.nrows(), matrix.ncols())?;
    let n = matrix.nrows();
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: alloc::vec::Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order for exact ties.
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().copied().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenPairs { values, vectors })
}

/// Solves `A e = v B e` for symmetric `A` and symmetric positive definite `B`.
///
/// Returns all eigenpairs, ascending, with `eᵀ B e = 1`. Fails with
/// [`Error::Regularization`] when `B` has no Cholesky factor; the carried
/// value is `NaN` because this routine does not know the regularizer.
pub fn generalized_symmetric_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<EigenPairs> {
    let n = a.nrows();
    check_dim("generalized eigen: A square", n, a.ncols())?;
    check_dim("generalized eigen: B rows", n, b.nrows())?;
    check_dim("generalized eigen: B cols", n, b.ncols())?;

    let b_sym = (b + b.transpose()) * 0.5;
    let chol = Cholesky::new(b_sym).ok_or(Error::Regularization(f64::NAN))?;
    let l = chol.l();

    // C = L⁻¹ A L⁻ᵀ, computed as two triangular solves.
    let left = l
        .solve_lower_triangular(a)
        .ok_or(Error::Regularization(f64::NAN))?;
    let c_t = l
        .solve_lower_triangular(&left.transpose())
        .ok_or(Error::Regularization(f64::NAN))?;
    let reduced = c_t.transpose();

    let standard = symmetric_eigen(&reduced)?;
    let lt = l.transpose();
    let vectors = lt
        .solve_upper_triangular(&standard.vectors)
        .ok_or(Error::Regularization(f64::NAN))?;

    Ok(EigenPairs {
        values: standard.values,
        vectors,
    })
}

/// `‖A e − v B e‖ / ((1+|v|)‖e‖)`
pub fn pair_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, v: f64, e: &DVector<f64>) -> f64 {
    let r = a * e - (b * e) * v;
    r.norm() / ((1.0 + v.abs()) * e.norm())
}

/// Polishes one generalized eigenpair of `A e = v B e` by inverse iteration
/// shifted at `v`, keeping `eᵀ B e = 1` and the sign of `e`. Returns the pair
/// with the smallest residual seen (possibly the input).
pub fn refine_generalized_pair(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    v: f64,
    e: &DVector<f64>,
    iterations: usize,
) -> (f64, DVector<f64>) {
    let mut best = (v, e.clone(), pair_residual(a, b, v, e));
    let mut cur = e.clone();
    let mut shift = v;
    for _ in 0..iterations {
        let lu = (a - b * shift).lu();
        let Some(x) = lu.solve(&(b * &cur)) else {
            // shift is an exact eigenvalue to working precision
            shift += f64::EPSILON * (1.0 + shift.abs());
            continue;
        };
        let bn = x.dot(&(b * &x));
        if !bn.is_finite() || bn <= 0.0 {
            break;
        }
        let mut next = x / libm::sqrt(bn);
        if next.dot(&(b * e)) < 0.0 {
            next = -next;
        }
        let rq = next.dot(&(a * &next));
        let res = pair_residual(a, b, rq, &next);
        if res < best.2 {
            best = (rq, next.clone(), res);
        }
        cur = next;
        shift = rq;
    }
    (best.0, best.1)
}
