//! Descriptor sets, PCA reduction of local descriptors, and a seeded
//! synthetic identity dataset generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetric_eigen;

/// The local descriptors of one image, with its identity label and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub image_id: String,
    pub camera_id: u32,
    pub label: usize,
    /// One row per local patch descriptor.
    pub descriptors: DMatrix<f64>,
}

impl DescriptorSet {
    pub fn new(
        image_id: impl Into<String>,
        camera_id: u32,
        label: usize,
        descriptors: DMatrix<f64>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if descriptors.nrows() == 0 || descriptors.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "image {image_id}: descriptor matrix must be non-empty"
            )));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "image {image_id}: descriptors contain NaN or Inf"
            )));
        }
        Ok(Self {
            image_id,
            camera_id,
            label,
            descriptors,
        })
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// Copies out the descriptor columns `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Result<DMatrix<f64>> {
        if start >= end || end > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} invalid for {}-dim descriptors",
                self.dim()
            )));
        }
        Ok(self.descriptors.columns(start, end - start).into_owned())
    }
}

/// Train/test assignment of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// A fitted PCA projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `out_dim × raw_dim`, orthonormal rows.
    pub basis: DMatrix<f64>,
    /// Covariance eigenvalues of the retained directions, nonincreasing.
    pub explained_variance: DVector<f64>,
}

/// Relative eigenvalue threshold below which a covariance direction counts as null.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits a PCA model on the rows of `data` using the sample covariance
/// (divisor `N − 1`).
pub fn pca_fit(data: &DMatrix<f64>, out_dim: usize) -> Result<PcaModel> {
    let n = data.nrows();
    let raw = data.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    let max_dim = (n - 1).min(raw);
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::Dimension {
            what: "pca_fit out_dim (max is min(N-1, D))",
            expected: max_dim,
            got: out_dim,
        });
    }

    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = symmetric_eigen(&cov)?;

    let top = eig.values[raw - 1].max(0.0);
    let rank = eig
        .values
        .iter()
        .filter(|&&v| top > 0.0 && v > RANK_TOLERANCE * top)
        .count();
    if out_dim > rank {
        return Err(Error::Rank {
            requested: out_dim,
            achievable: rank,
        });
    }

    let mut basis = DMatrix::zeros(out_dim, raw);
    let mut explained_variance = DVector::zeros(out_dim);
    for i in 0..out_dim {
        let src = raw - 1 - i;
        basis.set_row(i, &eig.vectors.column(src).transpose());
        explained_variance[i] = eig.values[src];
    }
    Ok(PcaModel {
        mean,
        basis,
        explained_variance,
    })
}

impl PcaModel {
    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Projects each row: `basis · (row − mean)`.
    pub fn project(&self, descriptors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("pca_project columns", self.raw_dim(), descriptors.ncols())?;
        let mut centered = descriptors.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.basis.transpose())
    }

    /// Maps projected coordinates back into descriptor space (without re-adding the mean).
    pub fn unproject_centered(&self, coords: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("pca unproject columns", self.out_dim(), coords.ncols())?;
        Ok(coords * &self.basis)
    }
}

pub fn pca_project(model: &PcaModel, descriptors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.project(descriptors)
}

/// Number of local descriptors in every synthetic image.
pub const SYNTH_PATCHES_PER_IMAGE: usize = 16;
const SYNTH_PROTOTYPES: usize = 6;

/// Generates `num_ids × per_id` synthetic images.
///
/// Every identity owns a mixture over shared prototype centres with its own
/// weights and offsets; images alternate between two cameras, each applying
/// its own affine distortion to the descriptors.
pub fn synth_generate(
    num_ids: usize,
    per_id: usize,
    d_raw: usize,
    seed: u64,
) -> Result<Vec<DescriptorSet>> {
    if num_ids < 2 || per_id < 2 || d_raw == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_generate needs num_ids >= 2, per_id >= 2, d_raw >= 1 (got {num_ids}, {per_id}, {d_raw})"
        )));
    }
    let mut rng = crate::seeded_rng(seed, 0x5e_17);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let prototypes = DMatrix::from_fn(SYNTH_PROTOTYPES, d_raw, |_, _| 3.0 * normal(&mut rng));

    let cameras: Vec<(DMatrix<f64>, DVector<f64>)> = (0..2)
        .map(|_| {
            let scale = 0.15 / libm::sqrt(d_raw as f64);
            let a = DMatrix::identity(d_raw, d_raw)
                + DMatrix::from_fn(d_raw, d_raw, |_, _| scale * normal(&mut rng));
            let b = DVector::from_fn(d_raw, |_, _| 0.4 * normal(&mut rng));
            (a, b)
        })
        .collect();

    let mut out = Vec::with_capacity(num_ids * per_id);
    for id in 0..num_ids {
        let mut weights: Vec<f64> = (0..SYNTH_PROTOTYPES)
            .map(|_| {
                let u: f64 = rng.random();
                u * u + 0.02
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let offsets = DMatrix::from_fn(SYNTH_PROTOTYPES, d_raw, |_, _| 1.2 * normal(&mut rng));

        for j in 0..per_id {
            let camera = (j % 2) as u32;
            let (a, b) = &cameras[camera as usize];
            let mut desc = DMatrix::zeros(SYNTH_PATCHES_PER_IMAGE, d_raw);
            for p in 0..SYNTH_PATCHES_PER_IMAGE {
                let comp = pick(&weights, rng.random());
                let x = DVector::from_fn(d_raw, |d, _| {
                    prototypes[(comp, d)] + offsets[(comp, d)] + 0.5 * normal(&mut rng)
                });
                let y = a * x + b;
                desc.set_row(p, &y.transpose());
            }
            out.push(DescriptorSet::new(
                format!("id{id:03}_c{camera}_{j:03}"),
                camera,
                id,
                desc,
            )?);
        }
    }
    Ok(out)
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Default split for synthetic data: the last two images of each identity
/// (one per camera) are held out for testing.
pub fn synth_split(index_within_identity: usize, per_id: usize) -> Split {
    if per_id >= 4 && index_within_identity + 2 >= per_id {
        Split::Test
    } else {
        Split::Train
    }
}
