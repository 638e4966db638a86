//! Fisher-vector encoding and its gradients with respect to the GMM.
//!
//! For a descriptor `x` and component `k` with `α_k = (x − μ_k)/σ_k`:
//!
//! ```text
//! φ_k(x) = γ_k(x) α_k / √π_k
//! ψ_k(x) = γ_k(x) (α_k² − 1) / √(2π_k)
//! ```
//!
//! An image is the average of `[φ_1 … φ_K, ψ_1 … ψ_K]` over its descriptors,
//! followed by a signed square root divided by `√‖Φ‖₁`, which leaves the
//! result with unit ℓ2 norm.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::error::{check_dim, Error, Result};
use crate::gmm::{copy_row, GmmModel, Precomputed};

const SQRT_2: f64 = core::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    /// `[φ_1 … φ_K, ψ_1 … ψ_K]`, each block of length `D`.
    pub values: DVector<f64>,
    pub normalized: bool,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Average-pooled, unnormalized Fisher vector of a descriptor set.
pub fn fv_encode(model: &GmmModel, descriptors: &DMatrix<f64>) -> Result<FisherVector> {
    check_dim("fv_encode descriptor dim", model.dim(), descriptors.ncols())?;
    if descriptors.nrows() == 0 {
        return Err(Error::InvalidArgument("cannot encode an empty descriptor set".into()));
    }
    let k = model.num_components();
    let d = model.dim();
    let kd = k * d;
    let pre = Precomputed::new(model);
    let weights = model.weights();
    let phi_scale: Vec<f64> = weights.iter().map(|&p| 1.0 / libm::sqrt(p)).collect();
    let psi_scale: Vec<f64> = weights.iter().map(|&p| 1.0 / libm::sqrt(2.0 * p)).collect();

    let mut values = DVector::zeros(2 * kd);
    let mut row = vec![0.0; d];
    let mut gamma = vec![0.0; k];
    for i in 0..descriptors.nrows() {
        copy_row(descriptors, i, &mut row);
        pre.posteriors_into(model, &row, &mut gamma);
        for c in 0..k {
            let g = gamma[c];
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                let a = (row[j] - model.means[(c, j)]) * pre.inv_std[c * d + j];
                values[c * d + j] += g * a * phi_scale[c];
                values[kd + c * d + j] += g * (a * a - 1.0) * psi_scale[c];
            }
        }
    }
    values /= descriptors.nrows() as f64;
    Ok(FisherVector {
        values,
        normalized: false,
    })
}

/// Signed square root divided by `√‖Φ‖₁`. An all-zero input maps to an
/// all-zero output (with a logged warning).
pub fn fv_normalize(fv: &FisherVector) -> FisherVector {
    let l1: f64 = fv.values.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        log::warn!("normalizing an all-zero Fisher vector");
        return FisherVector {
            values: DVector::zeros(fv.len()),
            normalized: true,
        };
    }
    let inv = 1.0 / libm::sqrt(l1);
    FisherVector {
        values: fv
            .values
            .map(|v| libm::copysign(libm::sqrt(v.abs()), v) * inv),
        normalized: true,
    }
}

/// Per-channel encode + normalize, concatenated in channel order.
pub fn fv_encode_image(models: &[GmmModel], channels: &[DMatrix<f64>]) -> Result<FisherVector> {
    check_dim("fv_encode_image channel count", models.len(), channels.len())?;
    let mut parts = Vec::with_capacity(models.len());
    for (m, c) in models.iter().zip(channels) {
        parts.push(fv_normalize(&fv_encode(m, c)?).values);
    }
    let total = parts.iter().map(|p| p.len()).sum();
    let mut values = DVector::zeros(total);
    let mut off = 0;
    for p in parts {
        values.rows_mut(off, p.len()).copy_from(&p);
        off += p.len();
    }
    Ok(FisherVector {
        values,
        normalized: true,
    })
}

/// Gradient with respect to the reparametrized GMM (`log π̃`, `μ`, `log σ²`).
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGradient {
    pub d_log_weights: DVector<f64>,
    /// `K × D`
    pub d_means: DMatrix<f64>,
    /// `K × D`
    pub d_log_vars: DMatrix<f64>,
}

impl GmmGradient {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            d_log_weights: DVector::zeros(k),
            d_means: DMatrix::zeros(k, d),
            d_log_vars: DMatrix::zeros(k, d),
        }
    }

    pub fn add_scaled(&mut self, other: &GmmGradient, scale: f64) {
        self.d_log_weights.axpy(scale, &other.d_log_weights, 1.0);
        self.d_means += &other.d_means * scale;
        self.d_log_vars += &other.d_log_vars * scale;
    }

    pub fn norm_squared(&self) -> f64 {
        self.d_log_weights.norm_squared() + self.d_means.norm_squared() + self.d_log_vars.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.d_log_weights
            .iter()
            .chain(self.d_means.iter())
            .chain(self.d_log_vars.iter())
            .all(|v| v.is_finite())
    }
}

/// Acceleration knobs for [`fv_grad_gmm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FvGradOptions {
    /// Output components `k'` with `γ_k' ≤ gamma_threshold` are skipped per descriptor.
    pub gamma_threshold: f64,
    /// Fraction of descriptors used for the gradient, in `(0, 1]`.
    pub subsample_fraction: f64,
    pub seed: u64,
}

impl FvGradOptions {
    /// Exact gradient: no thresholding, every descriptor.
    pub const EXACT: Self = Self {
        gamma_threshold: 0.0,
        subsample_fraction: 1.0,
        seed: 0,
    };
}

impl Default for FvGradOptions {
    fn default() -> Self {
        Self {
            gamma_threshold: 1e-5,
            subsample_fraction: 0.10,
            seed: 0,
        }
    }
}

/// Weights `w` such that `upstreamᵀ ∂Φ̄ = wᵀ ∂Φ` for the normalization map.
///
/// Coordinates with `Φ_d = 0` have an unbounded derivative; their direct
/// term is dropped.
fn normalization_pullback(raw: &DVector<f64>, upstream: &DVector<f64>) -> Option<DVector<f64>> {
    let l1: f64 = raw.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return None;
    }
    let normalized = fv_normalize(&FisherVector {
        values: raw.clone(),
        normalized: false,
    });
    let c = upstream.dot(&normalized.values) / (2.0 * l1);
    Some(DVector::from_fn(raw.len(), |i, _| {
        let v = raw[i];
        if v == 0.0 {
            0.0
        } else {
            upstream[i] / (2.0 * libm::sqrt(v.abs() * l1)) - c * v.signum()
        }
    }))
}

fn descriptor_subset(m: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..m).collect();
    }
    let take = (libm::ceil(fraction * m as f64) as usize).clamp(1, m);
    let mut rng = crate::seeded_rng(seed, 0xf5_9d);
    let mut idx = index::sample(&mut rng, m, take).into_vec();
    idx.sort_unstable();
    idx
}

fn validate_grad_inputs(
    model: &GmmModel,
    descriptors: &DMatrix<f64>,
    upstream_len: Option<usize>,
    opts: &FvGradOptions,
) -> Result<()> {
    check_dim("fv_grad_gmm descriptor dim", model.dim(), descriptors.ncols())?;
    if let Some(len) = upstream_len {
        check_dim(
            "fv_grad_gmm upstream length",
            2 * model.num_components() * model.dim(),
            len,
        )?;
    }
    if !(opts.subsample_fraction > 0.0 && opts.subsample_fraction <= 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "subsample_fraction must lie in (0, 1], got {}",
            opts.subsample_fraction
        )));
    }
    if descriptors.nrows() == 0 {
        return Err(Error::InvalidArgument("empty descriptor set".into()));
    }
    Ok(())
}

/// `upstreamᵀ J`, where `J` is the Jacobian of the normalized, average-pooled
/// Fisher vector with respect to (`log π̃`, `μ`, `log σ²`).
///
/// The per-descriptor derivatives share the factor `(δ_kk' − γ_k)`, so the
/// sums over output components collapse into per-component scalars and the
/// cost is `O(M·K·D)` rather than `O(M·K²·D²)`. [`fv_jacobian_gmm`] evaluates
/// the same quantity term by term.
pub fn fv_grad_gmm(
    model: &GmmModel,
    descriptors: &DMatrix<f64>,
    upstream: &DVector<f64>,
    opts: &FvGradOptions,
) -> Result<GmmGradient> {
    validate_grad_inputs(model, descriptors, Some(upstream.len()), opts)?;
    let k = model.num_components();
    let d = model.dim();
    let kd = k * d;
    let mut grad = GmmGradient::zeros(k, d);

    let raw = fv_encode(model, descriptors)?;
    let Some(w) = normalization_pullback(&raw.values, upstream) else {
        return Ok(grad);
    };

    let pre = Precomputed::new(model);
    let weights = model.weights();
    let inv_sqrt_pi: Vec<f64> = weights.iter().map(|&p| 1.0 / libm::sqrt(p)).collect();
    let subset = descriptor_subset(descriptors.nrows(), opts.subsample_fraction, opts.seed);

    let mut row = vec![0.0; d];
    let mut gamma = vec![0.0; k];
    let mut alpha = vec![0.0; kd];
    let mut t = vec![0.0; k];
    let mut active = vec![false; k];
    for &i in &subset {
        copy_row(descriptors, i, &mut row);
        pre.posteriors_into(model, &row, &mut gamma);
        for c in 0..k {
            for j in 0..d {
                alpha[c * d + j] = (row[j] - model.means[(c, j)]) * pre.inv_std[c * d + j];
            }
        }

        // T_k' = Σ_d' w·∂-free part: wφ·φ + wψ·ψ of this descriptor
        let mut t_sum = 0.0;
        for c in 0..k {
            active[c] = gamma[c] > opts.gamma_threshold;
            t[c] = 0.0;
            if !active[c] {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..d {
                let a = alpha[c * d + j];
                acc += w[c * d + j] * a + w[kd + c * d + j] * (a * a - 1.0) / SQRT_2;
            }
            t[c] = gamma[c] * inv_sqrt_pi[c] * acc;
            t_sum += t[c];
        }

        for c in 0..k {
            let coupled = t[c] - gamma[c] * t_sum;
            grad.d_log_weights[c] += 0.5 * (weights[c] * t_sum + t[c] - 2.0 * gamma[c] * t_sum);
            for j in 0..d {
                let a = alpha[c * d + j];
                let inv_sigma = pre.inv_std[c * d + j];
                let mut dm = a * inv_sigma * coupled;
                let mut dv = 0.5 * (a * a - 1.0) * coupled;
                if active[c] {
                    let direct = gamma[c] * inv_sqrt_pi[c]
                        * (w[c * d + j] + SQRT_2 * w[kd + c * d + j] * a);
                    dm -= inv_sigma * direct;
                    dv -= 0.5 * a * direct;
                }
                grad.d_means[(c, j)] += dm;
                grad.d_log_vars[(c, j)] += dv;
            }
        }
    }

    let scale = 1.0 / subset.len() as f64;
    grad.d_log_weights *= scale;
    grad.d_means *= scale;
    grad.d_log_vars *= scale;
    Ok(grad)
}

/// Full Jacobians of the normalized, average-pooled Fisher vector with respect
/// to the reparametrized GMM parameters. Column `k·D + d` of `d_means` and
/// `d_log_vars` belongs to `(k, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FvGmmGradient {
    /// `2KD × K`
    pub d_log_weights: DMatrix<f64>,
    /// `2KD × KD`
    pub d_means: DMatrix<f64>,
    /// `2KD × KD`
    pub d_log_vars: DMatrix<f64>,
}

impl FvGmmGradient {
    /// `upstreamᵀ J` reshaped like [`GmmGradient`].
    pub fn contract(&self, upstream: &DVector<f64>) -> GmmGradient {
        let k = self.d_log_weights.ncols();
        let d = self.d_means.ncols() / k.max(1);
        let w = self.d_log_weights.tr_mul(upstream);
        let m = self.d_means.tr_mul(upstream);
        let v = self.d_log_vars.tr_mul(upstream);
        GmmGradient {
            d_log_weights: w,
            d_means: DMatrix::from_fn(k, d, |c, j| m[c * d + j]),
            d_log_vars: DMatrix::from_fn(k, d, |c, j| v[c * d + j]),
        }
    }
}

/// Term-by-term Jacobian following the closed-form per-descriptor
/// derivatives with respect to `π` (on the simplex), `μ` and `σ`, then the
/// normalization chain rule and the change of variables to `log π̃` and
/// `log σ²`. Intended for small models and cross-checks.
pub fn fv_jacobian_gmm(
    model: &GmmModel,
    descriptors: &DMatrix<f64>,
    gamma_threshold: f64,
) -> Result<FvGmmGradient> {
    let opts = FvGradOptions {
        gamma_threshold,
        ..FvGradOptions::EXACT
    };
    validate_grad_inputs(model, descriptors, None, &opts)?;
    let k = model.num_components();
    let d = model.dim();
    let kd = k * d;
    let rows = 2 * kd;
    let pre = Precomputed::new(model);
    let pi = model.weights();
    let sigma = model.log_vars.map(|lv| libm::exp(0.5 * lv));
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };

    let mut j_pi = DMatrix::<f64>::zeros(rows, k);
    let mut j_mu = DMatrix::<f64>::zeros(rows, kd);
    let mut j_sigma = DMatrix::<f64>::zeros(rows, kd);
    let mut row = vec![0.0; d];
    let mut gamma = vec![0.0; k];
    for i in 0..descriptors.nrows() {
        copy_row(descriptors, i, &mut row);
        pre.posteriors_into(model, &row, &mut gamma);
        let alpha = |c: usize, j: usize| (row[j] - model.means[(c, j)]) / sigma[(c, j)];
        for kp in 0..k {
            if gamma[kp] <= gamma_threshold {
                continue;
            }
            let gk = gamma[kp];
            let sp = libm::sqrt(pi[kp]);
            let s2p = libm::sqrt(2.0 * pi[kp]);
            for dp in 0..d {
                let phi_row = kp * d + dp;
                let psi_row = kd + kp * d + dp;
                let a_out = alpha(kp, dp);
                for kk in 0..k {
                    let simplex = pi[kk] + delta(kk, kp) - 2.0 * gamma[kk];
                    j_pi[(phi_row, kk)] += gk * a_out / (2.0 * pi[kk] * sp) * simplex;
                    j_pi[(psi_row, kk)] += gk * (a_out * a_out - 1.0) / (2.0 * pi[kk] * s2p) * simplex;
                    let couple = delta(kk, kp) - gamma[kk];
                    for dd in 0..d {
                        let col = kk * d + dd;
                        let a_in = alpha(kk, dd);
                        let s = sigma[(kk, dd)];
                        let dd2 = delta(kk, kp) * delta(dd, dp);
                        j_mu[(phi_row, col)] += gk / (s * sp) * (a_out * a_in * couple - dd2);
                        j_sigma[(phi_row, col)] +=
                            gk * a_out / (s * sp) * ((a_in * a_in - 1.0) * couple - dd2);
                        j_mu[(psi_row, col)] +=
                            gk * a_in / (s * s2p) * ((a_out * a_out - 1.0) * couple - 2.0 * dd2);
                        j_sigma[(psi_row, col)] += gk / (s * s2p)
                            * ((a_out * a_out - 1.0) * (a_in * a_in - 1.0) * couple
                                - 2.0 * dd2 * a_in * a_in);
                    }
                }
            }
        }
    }
    let m = descriptors.nrows() as f64;
    j_pi /= m;
    j_mu /= m;
    j_sigma /= m;

    // normalization: ∇Φ̄_d = ∇Φ_d / (2√(|Φ_d|‖Φ‖₁)) − Φ̄_d Σ_d' sign(Φ_d') ∇Φ_d' / (2‖Φ‖₁)
    let raw = fv_encode(model, descriptors)?.values;
    let l1: f64 = raw.iter().map(|v| v.abs()).sum();
    let normalize = |jac: &DMatrix<f64>| -> DMatrix<f64> {
        if l1 == 0.0 {
            return DMatrix::zeros(jac.nrows(), jac.ncols());
        }
        let bar = fv_normalize(&FisherVector {
            values: raw.clone(),
            normalized: false,
        })
        .values;
        let signs = raw.map(f64::signum);
        let pooled = jac.tr_mul(&signs);
        DMatrix::from_fn(jac.nrows(), jac.ncols(), |r, c| {
            let direct = if raw[r] == 0.0 {
                0.0
            } else {
                jac[(r, c)] / (2.0 * libm::sqrt(raw[r].abs() * l1))
            };
            direct - bar[r] * pooled[c] / (2.0 * l1)
        })
    };
    let mut d_log_weights = normalize(&j_pi);
    let d_means = normalize(&j_mu);
    let mut d_log_vars = normalize(&j_sigma);

    // ∂/∂log π̃_k = π_k ∂/∂π̃_k, ∂/∂log σ² = (σ/2) ∂/∂σ
    for c in 0..k {
        d_log_weights.column_mut(c).scale_mut(pi[c]);
        for j in 0..d {
            d_log_vars.column_mut(c * d + j).scale_mut(0.5 * sigma[(c, j)]);
        }
    }
    Ok(FvGmmGradient {
        d_log_weights,
        d_means,
        d_log_vars,
    })
}
