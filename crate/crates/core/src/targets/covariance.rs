use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Symmetric positive-definite covariance with a cached factorisation.
///
/// Diagonal and dense representations share one interface; every operation the
/// mixture code needs (solves, log-determinants, square-root products) goes
/// through here.
#[derive(Debug, Clone)]
pub enum Covariance {
    Diagonal {
        variances: Vec<f64>,
    },
    Full {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

/// Serialised form of a covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    pub fn diagonal(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(invalid("covariance", "empty"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("diagonal variances must be positive"));
        }
        Ok(Self::Diagonal { variances })
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::diagonal(vec![variance; dim])
    }

    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(invalid("covariance", "matrix must be square and non-empty"));
        }
        // Symmetrise to absorb round-off from upstream algebra.
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let chol = Cholesky::new(matrix.clone()).ok_or(Error::NotPositiveDefinite("Cholesky factorisation failed"))?;
        Ok(Self::Full { matrix, chol })
    }

    pub fn from_spec(spec: &CovarianceSpec) -> Result<Self> {
        match spec {
            CovarianceSpec::Diagonal(v) => Self::diagonal(v.clone()),
            CovarianceSpec::Full(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(invalid("covariance", "full matrix rows must have equal length"));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Self::full(DMatrix::from_row_slice(n, n, &flat))
            }
        }
    }

    pub fn to_spec(&self) -> CovarianceSpec {
        match self {
            Self::Diagonal { variances } => CovarianceSpec::Diagonal(variances.clone()),
            Self::Full { matrix, .. } => {
                CovarianceSpec::Full(matrix.row_iter().map(|r| r.iter().copied().collect()).collect())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal { variances } => variances.len(),
            Self::Full { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Self::Diagonal { .. })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Diagonal { variances } => DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
            Self::Full { matrix, .. } => matrix.clone(),
        }
    }

    /// Dense precision matrix `Σ⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        match self {
            Self::Diagonal { variances } => DMatrix::from_diagonal(&DVector::from_iterator(
                variances.len(),
                variances.iter().map(|v| 1.0 / v),
            )),
            Self::Full { chol, .. } => chol.inverse(),
        }
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal { variances } => v.iter().zip(variances).map(|(a, s)| a / s).collect(),
            Self::Full { chol, .. } => {
                let x = chol.solve(&DVector::from_column_slice(v));
                x.as_slice().to_vec()
            }
        }
    }

    /// `log det Σ`.
    pub fn log_det(&self) -> f64 {
        match self {
            Self::Diagonal { variances } => variances.iter().map(|v| v.ln()).sum(),
            Self::Full { chol, .. } => 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        }
    }

    /// `L z` with `L Lᵀ = Σ`; maps standard normal draws onto this covariance.
    pub fn mul_sqrt(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal { variances } => z.iter().zip(variances).map(|(a, s)| a * s.sqrt()).collect(),
            Self::Full { chol, .. } => {
                let l = chol.l();
                (l * DVector::from_column_slice(z)).as_slice().to_vec()
            }
        }
    }

    /// `a Σ + b I`, keeping the diagonal representation when possible.
    pub fn scaled_plus_identity(&self, a: f64, b: f64) -> Result<Self> {
        match self {
            Self::Diagonal { variances } => Self::diagonal(variances.iter().map(|v| a * v + b).collect()),
            Self::Full { matrix, .. } => {
                let n = matrix.nrows();
                Self::full(matrix * a + DMatrix::identity(n, n) * b)
            }
        }
    }
}

impl PartialEq for Covariance {
    fn eq(&self, other: &Self) -> bool {
        self.to_spec() == other.to_spec()
    }
}
