//! Diagonal-covariance Gaussian mixture vocabulary.
//!
//! Parameters are stored in the form the end-to-end optimizer updates:
//! unnormalized log weights `log π̃`, means `μ`, and log variances `log σ²`.
//! Normalized weights `π = softmax(log π̃)` are computed on read.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::sq;

/// Lower bound on every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Smallest allowed ratio between a mixture weight and the largest weight.
pub const MIN_WEIGHT_RATIO: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub log_weights_unnorm: DVector<f64>,
    /// `K × D`
    pub means: DMatrix<f64>,
    /// `K × D`
    pub log_vars: DMatrix<f64>,
}

impl GmmModel {
    pub fn new(
        log_weights_unnorm: DVector<f64>,
        means: DMatrix<f64>,
        log_vars: DMatrix<f64>,
    ) -> Result<Self> {
        let k = log_weights_unnorm.len();
        if k == 0 {
            return Err(Error::InvalidArgument("GMM needs at least one component".into()));
        }
        check_dim("gmm means rows", k, means.nrows())?;
        check_dim("gmm log_vars rows", k, log_vars.nrows())?;
        check_dim("gmm log_vars cols", means.ncols(), log_vars.ncols())?;
        let all = log_weights_unnorm
            .iter()
            .chain(means.iter())
            .chain(log_vars.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("GMM parameters must be finite".into()));
        }
        let mut model = Self {
            log_weights_unnorm,
            means,
            log_vars,
        };
        model.enforce_floors();
        Ok(model)
    }

    /// Builds a model from normalized weights, means and variances.
    pub fn from_moments(
        weights: &DVector<f64>,
        means: DMatrix<f64>,
        variances: &DMatrix<f64>,
    ) -> Result<Self> {
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        Self::new(
            weights.map(libm::log),
            means,
            variances.map(|v| libm::log(v.max(VARIANCE_FLOOR))),
        )
    }

    pub fn num_components(&self) -> usize {
        self.log_weights_unnorm.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Normalized mixture weights (softmax of the stored logs).
    pub fn weights(&self) -> DVector<f64> {
        let max = self.log_weights_unnorm.max();
        let e = self.log_weights_unnorm.map(|l| libm::exp(l - max));
        let s = e.sum();
        e / s
    }

    pub fn variances(&self) -> DMatrix<f64> {
        self.log_vars.map(libm::exp)
    }

    /// Clamps variances to [`VARIANCE_FLOOR`] and keeps every mixture weight
    /// at least [`MIN_WEIGHT_RATIO`] times the largest one.
    pub fn enforce_floors(&mut self) {
        let mut floor = libm::log(VARIANCE_FLOOR);
        if libm::exp(floor) < VARIANCE_FLOOR {
            floor = floor.next_up();
        }
        self.log_vars.apply(|v| *v = v.max(floor));
        let lowest = self.log_weights_unnorm.max() + libm::log(MIN_WEIGHT_RATIO);
        self.log_weights_unnorm.apply(|w| *w = w.max(lowest));
    }

    /// Soft assignments `γ_k(x)`, computed with log-sum-exp.
    pub fn posteriors(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("posteriors input", self.dim(), x.len())?;
        let pre = Precomputed::new(self);
        let mut out = DVector::zeros(self.num_components());
        pre.posteriors_into(self, x, out.as_mut_slice());
        Ok(out)
    }

    /// Mean per-point log-likelihood of the rows of `data`.
    pub fn mean_log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        check_dim("log-likelihood input", self.dim(), data.ncols())?;
        let pre = Precomputed::new(self);
        let mut scratch = vec![0.0; self.num_components()];
        let mut row = vec![0.0; self.dim()];
        let mut total = 0.0;
        for i in 0..data.nrows() {
            copy_row(data, i, &mut row);
            total += pre.log_joint_into(self, &row, &mut scratch);
        }
        Ok(total / data.nrows() as f64)
    }
}

pub(crate) fn copy_row(m: &DMatrix<f64>, i: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = m[(i, j)];
    }
}

/// Per-component constants reused across many descriptors.
pub(crate) struct Precomputed {
    /// `log π_k − ½ Σ_d (log 2π + log σ²_kd)`
    pub log_norm: Vec<f64>,
    /// `1/σ_kd`, row-major `K × D`
    pub inv_std: Vec<f64>,
}

impl Precomputed {
    pub fn new(model: &GmmModel) -> Self {
        let k = model.num_components();
        let d = model.dim();
        let weights = model.weights();
        let mut log_norm = vec![0.0; k];
        let mut inv_std = vec![0.0; k * d];
        for c in 0..k {
            let mut acc = libm::log(weights[c]);
            for j in 0..d {
                let lv = model.log_vars[(c, j)];
                acc -= 0.5 * (LN_2PI + lv);
                inv_std[c * d + j] = libm::exp(-0.5 * lv);
            }
            log_norm[c] = acc;
        }
        Self { log_norm, inv_std }
    }

    /// Writes `log π_k N(x; μ_k, σ_k)` into `out` and returns the log-sum-exp.
    pub fn log_joint_into(&self, model: &GmmModel, x: &[f64], out: &mut [f64]) -> f64 {
        let d = model.dim();
        let mut max = f64::NEG_INFINITY;
        for (c, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for j in 0..d {
                let a = (x[j] - model.means[(c, j)]) * self.inv_std[c * d + j];
                q += a * a;
            }
            *o = self.log_norm[c] - 0.5 * q;
            max = max.max(*o);
        }
        let s: f64 = out.iter().map(|&l| libm::exp(l - max)).sum();
        max + libm::log(s)
    }

    /// Writes the posteriors of `x` into `out`; returns the log-likelihood of `x`.
    pub fn posteriors_into(&self, model: &GmmModel, x: &[f64], out: &mut [f64]) -> f64 {
        let lse = self.log_joint_into(model, x, out);
        for o in out.iter_mut() {
            *o = libm::exp(*o - lse);
        }
        lse
    }
}

/// Options for [`gmm_fit_em`].
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the per-point log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Maximum rows used for k-means++ seeding.
    pub kmeans_subsample: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            kmeans_iters: 10,
            kmeans_subsample: 20_000,
        }
    }
}

/// A fitted mixture and its EM diagnostics.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean per-point log-likelihood before each M-step, plus the final value.
    pub log_likelihoods: Vec<f64>,
    /// `(iteration, component)` pairs of components reseeded after emptying out.
    pub reseeded: Vec<(usize, usize)>,
    pub converged: bool,
}

/// Fits a `k`-component diagonal GMM by EM with k-means++ initialization.
pub fn gmm_fit_em(
    data: &DMatrix<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<EmFit> {
    gmm_fit_em_with(
        data,
        k,
        &EmOptions {
            max_iters,
            tol,
            seed,
            ..EmOptions::default()
        },
    )
}

pub fn gmm_fit_em_with(data: &DMatrix<f64>, k: usize, opts: &EmOptions) -> Result<EmFit> {
    let n = data.nrows();
    let d = data.ncols();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} points cannot fit {k} components"
        )));
    }
    if d == 0 || data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("EM data must be finite and non-empty".into()));
    }

    let mut rng = crate::seeded_rng(opts.seed, 0x6e_6d);
    let global_var = column_variances(data);
    let mut model = kmeans_init(data, k, opts, &global_var, &mut rng)?;

    let mut resp = DMatrix::<f64>::zeros(n, k);
    let mut log_likelihoods = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut row = vec![0.0; d];
    let mut gamma = vec![0.0; k];

    for iter in 0..=opts.max_iters {
        // E-step
        let pre = Precomputed::new(&model);
        let mut ll = 0.0;
        for i in 0..n {
            copy_row(data, i, &mut row);
            ll += pre.posteriors_into(&model, &row, &mut gamma);
            for c in 0..k {
                resp[(i, c)] = gamma[c];
            }
        }
        ll /= n as f64;
        if let Some(&prev) = log_likelihoods.last() {
            if ll - prev < opts.tol {
                log_likelihoods.push(ll);
                converged = true;
                break;
            }
        }
        log_likelihoods.push(ll);
        if iter == opts.max_iters {
            break;
        }

        // M-step
        let counts = resp.row_sum();
        let mut weights = DVector::zeros(k);
        let mut means = DMatrix::zeros(k, d);
        let mut vars = DMatrix::zeros(k, d);
        for c in 0..k {
            let nk = counts[c];
            if nk < 1e-10 * n as f64 {
                let pick = rng.random_range(0..n);
                means.set_row(c, &data.row(pick));
                vars.set_row(c, &global_var.transpose());
                weights[c] = 1.0 / n as f64;
                reseeded.push((iter, c));
                log::warn!("EM iteration {iter}: component {c} emptied out and was reseeded");
                continue;
            }
            weights[c] = nk / n as f64;
            for j in 0..d {
                let mut m = 0.0;
                for i in 0..n {
                    m += resp[(i, c)] * data[(i, j)];
                }
                m /= nk;
                let mut v = 0.0;
                for i in 0..n {
                    let diff = data[(i, j)] - m;
                    v += resp[(i, c)] * diff * diff;
                }
                means[(c, j)] = m;
                vars[(c, j)] = (v / nk).max(VARIANCE_FLOOR);
            }
        }
        model = GmmModel::from_moments(&weights, means, &vars)?;
    }

    Ok(EmFit {
        model,
        log_likelihoods,
        reseeded,
        converged,
    })
}

fn column_variances(data: &DMatrix<f64>) -> DVector<f64> {
    let n = data.nrows() as f64;
    let mean = data.row_mean();
    DVector::from_fn(data.ncols(), |j, _| {
        let v = data.column(j).iter().map(|x| sq(x - mean[j])).sum::<f64>() / n;
        v.max(VARIANCE_FLOOR)
    })
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| sq(a[(i, c)] - b[(j, c)])).sum()
}

fn kmeans_init<R: Rng>(
    data: &DMatrix<f64>,
    k: usize,
    opts: &EmOptions,
    global_var: &DVector<f64>,
    rng: &mut R,
) -> Result<GmmModel> {
    let n = data.nrows();
    let d = data.ncols();
    let sample: DMatrix<f64> = if n > opts.kmeans_subsample.max(k) {
        let mut idx = index::sample(rng, n, opts.kmeans_subsample.max(k)).into_vec();
        idx.sort_unstable();
        data.select_rows(idx.iter())
    } else {
        data.clone()
    };
    let m = sample.nrows();

    // k-means++ seeding
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.random_range(0..m);
    centers.set_row(0, &sample.row(first));
    let mut best: Vec<f64> = (0..m).map(|i| sq_dist(&sample, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in best.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.set_row(c, &sample.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(&sample, i, &centers, c));
        }
    }

    // Lloyd iterations
    let mut assign = vec![0usize; m];
    for _ in 0..opts.kmeans_iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(&sample, i, &centers, x).total_cmp(&sq_dist(&sample, i, &centers, y))
                })
                .unwrap_or(0);
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[(a, j)] += sample[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
    }

    let mut counts = vec![0usize; k];
    let mut vars = DMatrix::zeros(k, d);
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for j in 0..d {
            vars[(a, j)] += sq(sample[(i, j)] - centers[(a, j)]);
        }
    }
    let mut weights = DVector::zeros(k);
    for c in 0..k {
        if counts[c] >= 2 {
            for j in 0..d {
                let v: f64 = vars[(c, j)] / counts[c] as f64;
                vars[(c, j)] = v.max(VARIANCE_FLOOR);
            }
        } else {
            vars.set_row(c, &global_var.transpose());
        }
        weights[c] = (counts[c] as f64).max(1.0) / m as f64;
    }
    let total = weights.sum();
    weights /= total;
    GmmModel::from_moments(&weights, centers, &vars)
}
