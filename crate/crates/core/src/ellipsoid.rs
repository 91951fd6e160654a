//! Regularized covariance matrices kept in Cholesky form.
//!
//! A [`CovState`] represents `reg·I + Σ w²·z·zᵀ`. Updates are applied to the
//! lower-triangular factor directly with a rank-1 Cholesky update, so a
//! Mahalanobis query `‖z‖_{Σ⁻¹}` costs one forward substitution.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Number of rank-1 updates between full refactorizations of the Gram matrix.
pub const REFACTOR_EVERY: u64 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("covariance dimension must be at least 1")]
    ZeroDim,
    #[error("regularizer must be positive and finite, got {0}")]
    BadRegularizer(f64),
    #[error("dimension mismatch: covariance is {expected}-dimensional, vector has {got} entries")]
    DimMismatch { expected: usize, got: usize },
    #[error("update weight must be nonnegative and finite, got {0}")]
    BadWeight(f64),
    #[error("refactorization failed: matrix is no longer positive definite")]
    NotPositiveDefinite,
}

/// A symmetric positive definite matrix `reg·I + Σ w²zzᵀ` with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovState {
    dim: usize,
    reg: f64,
    /// Lower-triangular `L` with `L·Lᵀ` equal to the represented matrix.
    factor: DMatrix<f64>,
    /// The represented matrix accumulated explicitly; source for refactorization.
    gram: DMatrix<f64>,
    n_updates: u64,
    #[cfg(test)]
    log: Vec<(DVector<f64>, f64)>,
}

impl CovState {
    pub fn new(dim: usize, reg: f64) -> Result<Self, CovError> {
        if dim == 0 {
            return Err(CovError::ZeroDim);
        }
        if !(reg > 0.0 && reg.is_finite()) {
            return Err(CovError::BadRegularizer(reg));
        }
        Ok(Self {
            dim,
            reg,
            factor: DMatrix::identity(dim, dim) * reg.sqrt(),
            gram: DMatrix::identity(dim, dim) * reg,
            n_updates: 0,
            #[cfg(test)]
            log: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The diagonal regularizer the matrix was created with.
    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn n_updates(&self) -> u64 {
        self.n_updates
    }

    /// The lower-triangular Cholesky factor.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// The represented matrix, reconstructed as `L·Lᵀ`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<(), CovError> {
        if z.len() != self.dim {
            return Err(CovError::DimMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Adds `w²·z·zᵀ` to the represented matrix.
    pub fn rank1_update(&mut self, z: &DVector<f64>, w: f64) -> Result<(), CovError> {
        self.check_dim(z)?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(CovError::BadWeight(w));
        }
        let v = z * w;
        self.gram.ger(1.0, &v, &v, 1.0);
        self.n_updates += 1;
        #[cfg(test)]
        self.log.push((z.clone(), w));

        if self.n_updates.is_multiple_of(REFACTOR_EVERY) {
            self.refactor()
        } else {
            cholesky_rank1_update(&mut self.factor, v);
            Ok(())
        }
    }

    /// Recomputes the factor from the accumulated Gram matrix.
    pub fn refactor(&mut self) -> Result<(), CovError> {
        let chol = nalgebra::Cholesky::new(self.gram.clone()).ok_or(CovError::NotPositiveDefinite)?;
        self.factor = chol.unpack();
        Ok(())
    }

    /// Solves `L·u = z`. Then `‖u‖₂ = ‖z‖_{Σ⁻¹}`, and differences of whitened
    /// vectors give pairwise inverse norms without further solves.
    pub fn whiten(&self, z: &DVector<f64>) -> Result<DVector<f64>, CovError> {
        self.check_dim(z)?;
        let n = self.dim;
        let mut u = z.clone();
        for i in 0..n {
            let mut acc = u[i];
            for k in 0..i {
                acc -= self.factor[(i, k)] * u[k];
            }
            u[i] = acc / self.factor[(i, i)];
        }
        Ok(u)
    }

    /// `‖z‖_{Σ⁻¹} = √(zᵀ Σ⁻¹ z)`.
    pub fn inv_norm(&self, z: &DVector<f64>) -> Result<f64, CovError> {
        Ok(self.whiten(z)?.norm())
    }

    /// `‖v‖_Σ = √(vᵀ Σ v)`.
    pub fn norm(&self, v: &DVector<f64>) -> Result<f64, CovError> {
        self.check_dim(v)?;
        Ok((self.factor.transpose() * v).norm())
    }

    #[cfg(test)]
    pub(crate) fn update_log(&self) -> &[(DVector<f64>, f64)] {
        &self.log
    }
}

/// In-place update of a lower Cholesky factor so that `L'·L'ᵀ = L·Lᵀ + v·vᵀ`.
fn cholesky_rank1_update(l: &mut DMatrix<f64>, mut v: DVector<f64>) {
    let n = v.len();
    for k in 0..n {
        let vk = v[k];
        if vk == 0.0 {
            continue;
        }
        let lkk = l[(k, k)];
        let r = lkk.hypot(vk);
        let c = r / lkk;
        let s = vk / lkk;
        l[(k, k)] = r;
        for i in k + 1..n {
            let lik = (l[(i, k)] + s * v[i]) / c;
            v[i] = c * v[i] - s * lik;
            l[(i, k)] = lik;
        }
    }
}
