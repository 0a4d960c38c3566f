//! Dense symmetric positive semi-definite matrices and the handful of
//! factorization-based operations the bandit and mechanism code needs.
//!
//! Every quantity that involves a determinant is evaluated on `m + λI`
//! through a Cholesky factorization and kept in log space. Dimensions are
//! small (d ≤ a few dozen), so factorizations are recomputed on every call.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// A real column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn zeros(dim: usize) -> Self {
        RealVector(vec![0.0; dim])
    }

    pub fn new(entries: Vec<f64>) -> Self {
        RealVector(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &RealVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &RealVector) -> Result<()> {
        check_dim(self.dim(), x.dim())?;
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn set_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl std::ops::Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for RealVector {
    fn from(v: Vec<f64>) -> Self {
        RealVector(v)
    }
}

/// Symmetric `d × d` matrix stored row-major.
///
/// Symmetry is enforced on construction and preserved by every mutating
/// operation (updates write the upper triangle and mirror it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl PsdMatrix {
    pub fn zeros(dim: usize) -> Self {
        PsdMatrix {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.entries[i * m.dim + i] = *v;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting asymmetric input.
    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (entries[i * dim + j] - entries[j * dim + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(PsdMatrix { dim, entries })
    }

    /// `Σ xᵢ xᵢᵀ` over the given vectors.
    pub fn gram<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a RealVector>) -> Result<Self> {
        let mut m = Self::zeros(dim);
        for x in vectors {
            m.rank_one_update_in_place(x)?;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| *v == 0.0)
    }

    pub fn set_zero(&mut self) {
        self.entries.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &PsdMatrix) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &PsdMatrix) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a -= b;
        }
        Ok(())
    }

    pub fn add(&self, other: &PsdMatrix) -> Result<PsdMatrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &PsdMatrix) -> Result<PsdMatrix> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn mul_vec(&self, x: &RealVector) -> Result<RealVector> {
        check_dim(self.dim, x.dim())?;
        let d = self.dim;
        Ok(RealVector(
            (0..d)
                .map(|i| (0..d).map(|j| self.entries[i * d + j] * x[j]).sum())
                .collect(),
        ))
    }

    /// `self += x xᵀ`, computed on the upper triangle and mirrored.
    pub fn rank_one_update_in_place(&mut self, x: &RealVector) -> Result<()> {
        check_dim(self.dim, x.dim())?;
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                let v = self.entries[i * d + j] + x[i] * x[j];
                self.entries[i * d + j] = v;
                self.entries[j * d + i] = v;
            }
        }
        Ok(())
    }

    pub fn rank_one_update(&self, x: &RealVector) -> Result<PsdMatrix> {
        let mut out = self.clone();
        out.rank_one_update_in_place(x)?;
        Ok(out)
    }

    /// Determinant of the raw matrix (no ridge), via partial-pivoting
    /// elimination. Rank-deficient PSD input yields exactly zero when a pivot
    /// vanishes; tiny negative round-off is clamped to zero.
    pub fn raw_det(&self) -> f64 {
        let d = self.dim;
        let mut a = self.entries.clone();
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return if d == 0 { 1.0 } else { 0.0 };
        }
        let mut det = 1.0;
        for col in 0..d {
            let pivot_row = (col..d)
                .max_by(|&r, &s| a[r * d + col].abs().total_cmp(&a[s * d + col].abs()))
                .unwrap_or(col);
            let pivot = a[pivot_row * d + col];
            if pivot.abs() <= scale * 1e-13 {
                return 0.0;
            }
            if pivot_row != col {
                for k in 0..d {
                    a.swap(col * d + k, pivot_row * d + k);
                }
                det = -det;
            }
            det *= pivot;
            for r in (col + 1)..d {
                let f = a[r * d + col] / pivot;
                for k in col..d {
                    a[r * d + k] -= f * a[col * d + k];
                }
            }
        }
        det.max(0.0)
    }
}

/// Sufficient statistics `(V, b) = (Σ x xᵀ, Σ x y)` of a set of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub v: PsdMatrix,
    pub b: RealVector,
}

impl SufficientStats {
    pub fn zeros(dim: usize) -> Self {
        SufficientStats {
            v: PsdMatrix::zeros(dim),
            b: RealVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.dim()
    }

    /// Absorbs one observation `(x, y)`.
    pub fn observe(&mut self, x: &RealVector, y: f64) -> Result<()> {
        self.v.rank_one_update_in_place(x)?;
        self.b.axpy(y, x)
    }

    pub fn add_assign(&mut self, other: &SufficientStats) -> Result<()> {
        self.v.add_assign(&other.v)?;
        self.b.axpy(1.0, &other.b)
    }

    pub fn is_zero(&self) -> bool {
        self.v.is_zero() && self.b.is_zero()
    }

    pub fn set_zero(&mut self) {
        self.v.set_zero();
        self.b.set_zero();
    }
}

/// Lower-triangular Cholesky factor of `m + λI`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &PsdMatrix, ridge: f64) -> Result<Self> {
        let d = m.dim;
        let mut l = vec![0.0; d * d];
        for j in 0..d {
            let mut diag = m.entries[j * d + j] + ridge;
            for k in 0..j {
                diag -= l[j * d + k] * l[j * d + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    index: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[j * d + j] = ljj;
            for i in (j + 1)..d {
                let mut s = m.entries[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                l[i * d + j] = s / ljj;
            }
        }
        Ok(Cholesky { dim: d, lower: l })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
    }

    /// Solves `L y = rhs` (forward substitution).
    fn forward(&self, rhs: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = rhs[i];
            for k in 0..i {
                s -= self.lower[i * d + k] * y[k];
            }
            y[i] = s / self.lower[i * d + i];
        }
        y
    }

    pub fn solve(&self, rhs: &RealVector) -> Result<RealVector> {
        check_dim(self.dim, rhs.dim())?;
        let d = self.dim;
        let y = self.forward(rhs.as_slice());
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= self.lower[k * d + i] * x[k];
            }
            x[i] = s / self.lower[i * d + i];
        }
        Ok(RealVector(x))
    }

    /// `sqrt(xᵀ (LLᵀ)⁻¹ x) = ‖L⁻¹ x‖₂`
    pub fn inverse_norm(&self, x: &RealVector) -> Result<f64> {
        check_dim(self.dim, x.dim())?;
        Ok(self
            .forward(x.as_slice())
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt())
    }
}

/// `log det(m + λI)`.
pub fn log_det(m: &PsdMatrix, ridge: f64) -> Result<f64> {
    Ok(Cholesky::factor(m, ridge)?.log_det())
}

pub fn rank_one_update(m: &PsdMatrix, x: &RealVector) -> Result<PsdMatrix> {
    m.rank_one_update(x)
}

/// Solves `(m + λI) v = rhs`.
pub fn solve_spd(m: &PsdMatrix, ridge: f64, rhs: &RealVector) -> Result<RealVector> {
    Cholesky::factor(m, ridge)?.solve(rhs)
}

/// `‖x‖` in the norm induced by `(m + λI)⁻¹`.
pub fn mahalanobis_norm(m: &PsdMatrix, ridge: f64, x: &RealVector) -> Result<f64> {
    Cholesky::factor(m, ridge)?.inverse_norm(x)
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
