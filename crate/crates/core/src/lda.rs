//! Scatter matrices, the regularized generalized eigenproblem
//! `S_b e = v (S_w + λI) e`, the smallest-eigenvalue objective and its
//! gradient with respect to the hidden batch representation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{generalized_symmetric_eigen, pair_residual, refine_generalized_pair};

/// Default ridge added to the within-class scatter.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Default offset above the minimum eigenvalue that selects active eigenvalues.
/// Bound on [`residual_ratio`] checked after every solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

const REFINE_ABOVE: f64 = 1e-9;

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet {
    pub s_w: DMatrix<f64>,
    pub s_b: DMatrix<f64>,
    pub s_t: DMatrix<f64>,
    /// `C × d`, rows ordered like `class_labels`.
    pub class_means: DMatrix<f64>,
    pub counts: Vec<usize>,
    /// Distinct labels present in the batch, ascending.
    pub class_labels: Vec<usize>,
}

impl ScatterSet {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Groups row indices by label (ascending label order).
fn group_rows(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn centered_rows(hidden: &DMatrix<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let sub = hidden.select_rows(rows.iter());
    let mean = sub.row_mean().transpose();
    let mut centered = sub;
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    (centered, mean)
}

/// Scatter matrices of a labeled batch:
/// `S_c = X̄_cᵀX̄_c/(N_c−1)`, `S_w = (1/C)Σ_c S_c`, `S_t = X̄ᵀX̄/(N−1)`,
/// `S_b = S_t − S_w`.
pub fn scatter(hidden: &DMatrix<f64>, labels: &[usize]) -> Result<ScatterSet> {
    let n = hidden.nrows();
    let d = hidden.ncols();
    check_dim("scatter labels", n, labels.len())?;
    if n < 2 {
        return Err(Error::BatchSize(n));
    }
    let groups = group_rows(labels);
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "scatter needs at least 2 classes, batch has {}",
            groups.len()
        )));
    }
    if let Some((&label, rows)) = groups.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::BatchComposition {
            label,
            count: rows.len(),
        });
    }

    let c = groups.len();
    let mut s_w = DMatrix::zeros(d, d);
    let mut class_means = DMatrix::zeros(c, d);
    let mut counts = Vec::with_capacity(c);
    let mut class_labels = Vec::with_capacity(c);
    for (ci, (&label, rows)) in groups.iter().enumerate() {
        let (xc, mean) = centered_rows(hidden, rows);
        s_w += xc.tr_mul(&xc) / (rows.len() as f64 - 1.0);
        class_means.set_row(ci, &mean.transpose());
        counts.push(rows.len());
        class_labels.push(label);
    }
    s_w /= c as f64;

    let all: Vec<usize> = (0..n).collect();
    let (xt, _) = centered_rows(hidden, &all);
    let s_t = xt.tr_mul(&xt) / (n as f64 - 1.0);
    let s_b = &s_t - &s_w;
    Ok(ScatterSet {
        s_w,
        s_b,
        s_t,
        class_means,
        counts,
        class_labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    /// The largest `min(C−1, d)` generalized eigenvalues, ascending.
    pub eigenvalues: DVector<f64>,
    /// One eigenvector per row, normalized so `eᵀ(S_w + λI)e = 1`.
    pub eigenvectors: DMatrix<f64>,
    pub lambda_reg: f64,
}

/// Solves `S_b e = v (S_w + λI) e` and keeps the top `C − 1` eigenpairs.
pub fn lda_solve(scatter: &ScatterSet, lambda_reg: f64) -> Result<EigenSolution> {
    let d = scatter.s_w.nrows();
    let regularized = &scatter.s_w + DMatrix::<f64>::identity(d, d) * lambda_reg;
    let all = generalized_symmetric_eigen(&scatter.s_b, &regularized).map_err(|e| match e {
        Error::Regularization(_) => Error::Regularization(lambda_reg),
        other => other,
    })?;
    let keep = scatter.num_classes().saturating_sub(1).min(d);
    let start = d - keep;
    let mut pairs: Vec<(f64, DVector<f64>)> = (start..d)
        .map(|i| {
            let v = all.values[i];
            let e = all.vectors.column(i).into_owned();
            if pair_residual(&scatter.s_b, &regularized, v, &e) > REFINE_ABOVE {
                // ill-conditioned S_w + λI: polish in the original coordinates
                refine_generalized_pair(&scatter.s_b, &regularized, v, &e, 3)
            } else {
                (v, e)
            }
        })
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut eigenvectors = DMatrix::zeros(keep, d);
    for (r, (_, e)) in pairs.iter().enumerate() {
        eigenvectors.set_row(r, &e.transpose());
    }
    let solution = EigenSolution {
        eigenvalues: DVector::from_iterator(keep, pairs.iter().map(|p| p.0)),
        eigenvectors,
        lambda_reg,
    };
    let residual = residual_ratio(scatter, &solution);
    if residual.is_nan() || residual > RESIDUAL_TOLERANCE {
        return Err(Error::Consistency(format!(
            "generalized eigen residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}"
        )));
    }
    Ok(solution)
}

/// Largest `‖S_b e − v (S_w+λI) e‖ / ((1+|v|)‖e‖)` over the solution's pairs.
pub fn residual_ratio(scatter: &ScatterSet, solution: &EigenSolution) -> f64 {
    let d = scatter.s_w.nrows();
    let b = &scatter.s_w + DMatrix::<f64>::identity(d, d) * solution.lambda_reg;
    let mut worst: f64 = 0.0;
    for (i, &v) in solution.eigenvalues.iter().enumerate() {
        let e = solution.eigenvectors.row(i).transpose();
        let r = &scatter.s_b * &e - (&b * &e) * v;
        worst = worst.max(r.norm() / ((1.0 + v.abs()) * e.norm()));
    }
    worst
}

/// Mean of the eigenvalues strictly below `min + ε`, with the participation mask.
pub fn lda_loss(eigenvalues: &DVector<f64>, epsilon: f64) -> (f64, Vec<bool>) {
    if eigenvalues.is_empty() {
        return (0.0, Vec::new());
    }
    let min = eigenvalues.min();
    let threshold = min + epsilon;
    let mask: Vec<bool> = eigenvalues
        .iter()
        .map(|&v| v < threshold || v == min)
        .collect();
    let (sum, m) = eigenvalues
        .iter()
        .zip(&mask)
        .filter(|(_, &on)| on)
        .fold((0.0, 0usize), |(s, m), (&v, _)| (s + v, m + 1));
    (sum / m as f64, mask)
}

/// Gradient of the mean active eigenvalue with respect to every hidden entry,
/// `(1/m) Σ_i e_iᵀ(∂S_b/∂X − v_i ∂S_w/∂X)e_i`, with `λ`, the eigenvectors'
/// normalization and the active set held fixed.
///
/// With `S_b = S_t − S_w` and `∂(eᵀS_t e)/∂X = 2X̄eeᵀ/(N−1)` (the centering
/// term drops out because centered columns sum to zero), each eigenvalue
/// contributes `2X̄eeᵀ/(N−1) − (1+v)·(1/C)Σ_c 2X̄_c eeᵀ/(N_c−1)`.
pub fn lda_grad_hidden(
    hidden: &DMatrix<f64>,
    labels: &[usize],
    solution: &EigenSolution,
    active_mask: &[bool],
) -> Result<DMatrix<f64>> {
    let n = hidden.nrows();
    let d = hidden.ncols();
    check_dim("lda_grad_hidden labels", n, labels.len())?;
    if active_mask.len() != solution.eigenvalues.len() || solution.eigenvectors.nrows() != active_mask.len() {
        return Err(Error::Consistency(format!(
            "active mask has {} entries for {} eigenpairs",
            active_mask.len(),
            solution.eigenvalues.len()
        )));
    }
    check_dim("lda_grad_hidden eigenvector width", d, solution.eigenvectors.ncols())?;
    let m = active_mask.iter().filter(|&&a| a).count();
    if m == 0 {
        return Err(Error::Consistency("no active eigenvalue".into()));
    }

    let groups = group_rows(labels);
    let c = groups.len() as f64;
    let all: Vec<usize> = (0..n).collect();
    let (xt, _) = centered_rows(hidden, &all);

    // X̄_c scattered back into full-batch row positions, scaled by 2/(C(N_c−1)).
    let mut within = DMatrix::zeros(n, d);
    for rows in groups.values() {
        if rows.len() < 2 {
            return Err(Error::BatchComposition {
                label: labels[rows[0]],
                count: rows.len(),
            });
        }
        let (xc, _) = centered_rows(hidden, rows);
        let scale = 2.0 / (c * (rows.len() as f64 - 1.0));
        for (r, &row) in rows.iter().enumerate() {
            for j in 0..d {
                within[(row, j)] = scale * xc[(r, j)];
            }
        }
    }
    let total = xt * (2.0 / (n as f64 - 1.0));

    let mut grad = DMatrix::zeros(n, d);
    for (i, _) in active_mask.iter().enumerate().filter(|(_, &a)| a) {
        let e = solution.eigenvectors.row(i).transpose();
        let v = solution.eigenvalues[i];
        let proj_t = &total * &e;
        let proj_w = &within * &e;
        let coeff = proj_t - proj_w * (1.0 + v);
        grad += coeff * e.transpose();
    }
    Ok(grad / m as f64)
}

/// Scatter, solve and loss in one call.
pub fn lda_objective(
    hidden: &DMatrix<f64>,
    labels: &[usize],
    lambda_reg: f64,
    epsilon: f64,
) -> Result<(f64, EigenSolution, Vec<bool>)> {
    let s = scatter(hidden, labels)?;
    let sol = lda_solve(&s, lambda_reg)?;
    let (loss, mask) = lda_loss(&sol.eigenvalues, epsilon);
    Ok((loss, sol, mask))
}
