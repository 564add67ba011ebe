//! Multivariate Gaussian density evaluation and sampling.
//!
//! The Cholesky factor of the covariance is computed once per distribution
//! and reused for every density query and draw, which matters in the Monte
//! Carlo loops that call these millions of times.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("mean has dimension {mean} but covariance is {cov}x{cov}")]
    DimensionMismatch { mean: usize, cov: usize },
    #[error("covariance is not symmetric: |S[{i}][{j}] - S[{j}][{i}]| = {diff:.3e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("covariance is not positive definite (Cholesky factorization failed)")]
    NotPositiveDefinite,
    #[error("input point has dimension {got}, distribution has dimension {want}")]
    BadPoint { got: usize, want: usize },
}

const SYMMETRY_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.8378770664093453;

/// A multivariate normal with precomputed Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct MvGaussian {
    mean: DVector<f64>,
    /// Lower-triangular L with covariance = L * L^T.
    chol_l: DMatrix<f64>,
    /// -(n/2) ln(2 pi) - (1/2) ln det(covariance)
    log_norm: f64,
}

impl MvGaussian {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self, GaussianError> {
        let n = covariance.nrows();
        if mean.len() != n || covariance.ncols() != n {
            return Err(GaussianError::DimensionMismatch {
                mean: mean.len(),
                cov: n,
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (covariance[(i, j)] - covariance[(j, i)]).abs();
                if diff > SYMMETRY_TOL {
                    return Err(GaussianError::NotSymmetric { i, j, diff });
                }
            }
        }
        // Work on the symmetrized matrix so sub-tolerance asymmetry cannot
        // push a borderline factorization either way.
        let sym = (covariance + covariance.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or(GaussianError::NotPositiveDefinite)?;
        let chol_l = chol.l();
        let ln_det: f64 = (0..n).map(|i| chol_l[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (n as f64) * LN_2PI - 0.5 * ln_det;
        Ok(Self {
            mean,
            chol_l,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Log density at `y`: log_norm - (1/2) (y-mean)^T cov^-1 (y-mean),
    /// with the quadratic form evaluated by forward substitution.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64, GaussianError> {
        if y.len() != self.dim() {
            return Err(GaussianError::BadPoint {
                got: y.len(),
                want: self.dim(),
            });
        }
        let diff = y - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        Ok(self.log_norm - 0.5 * z.norm_squared())
    }

    /// Draw mean + L * xi with xi standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol_l * xi
    }
}

/// Symmetrize and clamp the eigenvalues of a covariance candidate to at
/// least `floor`, returning a matrix safe to factorize. Used where sample
/// covariances of degenerate data (constant sequences, single points) feed
/// into priors.
pub fn clamp_spd(matrix: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}
