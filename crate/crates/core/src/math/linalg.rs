//! Small dense linear algebra on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Points of the sample space (`z_t`, `z_0`, noise draws).
pub type Point = DVector<f64>;

/// Largest supported sample-space dimension.
pub const MAX_DIM: usize = 16;

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry (to 1e-12, relative to the largest entry) and
    /// positive definiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        let min_eig = SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite {
                message: "matrix has a non-positive eigenvalue".into(),
                eigenvalue: min_eig,
            });
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn sqrt(&self) -> Result<SpdMatrix> {
        spd_sqrt(&self.0)
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let scale = m.amax().max(1.0);
    for row in 0..m.nrows() {
        for col in row + 1..m.ncols() {
            let gap = (m[(row, col)] - m[(col, row)]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric { row, col, gap });
            }
        }
    }
    Ok(())
}

/// Principal square root of an SPD matrix via symmetric eigendecomposition.
///
/// Errors name the offending eigenvalue when the input is not positive definite.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<SpdMatrix> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite {
            message: "square root requested for a matrix that is not positive definite".into(),
            eigenvalue: bad,
        });
    }
    let roots = eig.eigenvalues.map(f64::sqrt);
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok(SpdMatrix((&r + r.transpose()) * 0.5))
}
