//! Frechet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and unbiased covariance of `M x C` feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn fit(features: &Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::contract(format!("features must be [M, C], got {:?}", features.shape())));
        }
        if !features.is_finite() {
            return Err(Error::contract("features contain non-finite values"));
        }
        let (m, c) = (features.shape()[0], features.shape()[1]);
        if m < 2 {
            return Err(Error::contract(format!("covariance needs at least 2 samples, got {m}")));
        }
        if m < c + 1 {
            log::warn!("only {m} samples for {c}-dimensional features; covariance is rank-deficient");
        }
        let x = DMatrix::from_row_slice(m, c, features.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = (centered.transpose() * &centered) / (m - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `||m_x - m_y||^2 + Tr(S_x + S_y - 2 (S_x S_y)^(1/2))`.
///
/// The trace of the product root is taken as the trace of
/// `(S_x^(1/2) S_y S_x^(1/2))^(1/2)`, which is symmetric and has the same
/// eigenvalues.
pub fn fpd_stats(x: &GaussianStats, y: &GaussianStats) -> Result<f64> {
    if x.mean.len() != y.mean.len() {
        return Err(Error::contract(format!(
            "feature widths differ: {} vs {}",
            x.mean.len(),
            y.mean.len()
        )));
    }
    let diff = (&x.mean - &y.mean).norm_squared();
    let root_x = sqrt_psd(&x.cov);
    let inner = &root_x * &y.cov * &root_x;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok(diff + x.cov.trace() + y.cov.trace() - 2.0 * cross)
}

pub fn fpd(features_x: &Tensor, features_y: &Tensor) -> Result<f64> {
    fpd_stats(&GaussianStats::fit(features_x)?, &GaussianStats::fit(features_y)?)
}
