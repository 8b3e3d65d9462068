//! Distribution metrics over motion feature vectors.
//!
//! FID compares Gaussian fits of two feature sets, Diversity is the mean
//! distance between random pairs of one set, and MultiModality the same
//! quantity within the repeated generations for a single video.

pub mod extractor;
pub mod protocol;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use extractor::{ExtractorConfig, FeatureExtractor};
pub use protocol::{evaluate_protocol, MetricReport, ProtocolConfig, ProtocolReport, ReactionSource, METRIC_NAMES};

pub const DIVERSITY_PAIRS: usize = 300;
pub const MULTIMODALITY_PAIRS: usize = 10;
pub const MULTIMODALITY_GENERATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `count x dim` feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatureSet {
    dim: usize,
    rows: Vec<f32>,
    pub source: FeatureSource,
}

impl MotionFeatureSet {
    pub fn new(dim: usize, rows: Vec<f32>, source: FeatureSource) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature set contains non-finite values".into()));
        }
        Ok(MotionFeatureSet { dim, rows, source })
    }

    pub fn from_vectors(vectors: &[Vec<f32>], source: FeatureSource) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("feature vectors differ in width"));
        }
        Self::new(dim, vectors.concat(), source)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.count();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
        }
        let x = DMatrix::from_row_iterator(n, self.dim, self.rows.iter().map(|&v| v as f64));
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    }
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Eigen-reconstruction with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians.
///
/// `Tr((S_r S_g)^(1/2))` is taken as the trace of the root of the symmetric
/// similar matrix `S_r^(1/2) S_g S_r^(1/2)`, which shares its spectrum.
pub fn fid_from_moments(mu_r: &DVector<f64>, cov_r: &DMatrix<f64>, mu_g: &DVector<f64>, cov_g: &DMatrix<f64>) -> Result<f64> {
    let d = mu_r.len();
    if mu_g.len() != d || cov_r.shape() != (d, d) || cov_g.shape() != (d, d) {
        return Err(Error::invalid("moment shapes disagree"));
    }
    if cov_r.iter().chain(cov_g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("covariance is not finite".into()));
    }
    let root_r = psd_sqrt(cov_r);
    let inner = &root_r * cov_g * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (mu_r - mu_g).norm_squared();
    Ok((mean_term + cov_r.trace() + cov_g.trace() - 2.0 * cross).max(0.0))
}

pub fn fid(real: &MotionFeatureSet, generated: &MotionFeatureSet) -> Result<f64> {
    if real.dim != generated.dim {
        return Err(Error::Shape {
            what: "feature width".into(),
            expected: real.dim,
            found: generated.dim,
        });
    }
    for set in [real, generated] {
        if set.count() <= set.dim {
            log::warn!(
                "FID on {} vectors of width {}: covariance is rank deficient",
                set.count(),
                set.dim
            );
        }
    }
    let (mu_r, cov_r) = real.moments()?;
    let (mu_g, cov_g) = generated.moments()?;
    fid_from_moments(&mu_r, &cov_r, &mu_g, &cov_g)
}

/// Uniform index pair with `i != j`.
fn sample_pair(count: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.random_range(0..count);
    let mut j = rng.random_range(0..count - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

fn mean_pair_distance(set: &MotionFeatureSet, n_pairs: usize, rng: &mut Rng) -> f64 {
    let total: f64 = (0..n_pairs)
        .map(|_| {
            let (i, j) = sample_pair(set.count(), rng);
            distance(set.row(i), set.row(j))
        })
        .sum();
    total / n_pairs as f64
}

/// Mean distance over `n_pairs` pairs drawn with replacement.
pub fn diversity(features: &MotionFeatureSet, n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    if features.count() < 2 {
        return Err(Error::invalid("diversity needs at least 2 feature vectors"));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("diversity needs at least one pair"));
    }
    Ok(mean_pair_distance(features, n_pairs, rng))
}

/// Mean over videos of the within-video diversity of its generations.
pub fn multimodality(per_video: &[MotionFeatureSet], n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    if per_video.is_empty() || n_pairs == 0 {
        return Err(Error::invalid("multimodality needs videos and at least one pair"));
    }
    let mut total = 0.0;
    for (v, set) in per_video.iter().enumerate() {
        if set.count() < MULTIMODALITY_GENERATIONS {
            return Err(Error::invalid(format!(
                "video {v} has {} generations, multimodality needs {MULTIMODALITY_GENERATIONS}",
                set.count()
            )));
        }
        total += mean_pair_distance(set, n_pairs, rng);
    }
    Ok(total / per_video.len() as f64)
}

/// Exhaustive mean distance over all unordered pairs `i < j`.
pub fn all_pairs_mean_distance(features: &MotionFeatureSet) -> f64 {
    let n = features.count();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += distance(features.row(i), features.row(j));
        }
    }
    total / (n * (n - 1) / 2) as f64
}
