//! Regularized Gram matrices with incremental Cholesky maintenance.
//!
//! Every learner in the crate keeps matrices of the form `λI + Σ φφᵀ`. The
//! hot path adds one outer product per observed transition; synchronization
//! folds a whole batch in at once. [`RegularizedCovariance`] keeps a Cholesky
//! factor and the log-determinant cached so that bonuses, ridge solves and
//! determinant-ratio triggers are all `O(d²)` per query.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{invalid, Result};

/// Fixed numeric tolerances used by checks throughout the crate.
pub mod tolerance {
    /// Entrywise symmetry slack for covariance and delta matrices.
    pub const SYMMETRY: f64 = 1e-12;
    /// Slack on symmetry and PSD-ness of externally supplied deltas.
    pub const PSD: f64 = 1e-9;
    /// Allowed shortfall of the smallest eigenvalue below the ridge.
    pub const EIGEN_FLOOR: f64 = 1e-9;
    /// Agreement between cached and recomputed log-determinants.
    pub const LOG_DET: f64 = 1e-9;
    /// Relative residual allowed in ridge solves.
    pub const RESIDUAL: f64 = 1e-8;
    /// Slack on the unit-norm precondition of feature vectors.
    pub const FEATURE_NORM: f64 = 1e-9;
}

/// `λI + Σ_τ φ_τ φ_τᵀ` together with its Cholesky factor and log-determinant.
#[derive(Clone, Debug)]
pub struct RegularizedCovariance {
    ridge: f64,
    matrix: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl RegularizedCovariance {
    pub fn new(dim: usize, ridge: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("covariance dimension must be at least 1"));
        }
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(invalid(format!("ridge must be positive and finite, got {ridge}")));
        }
        let matrix = DMatrix::identity(dim, dim) * ridge;
        let factor = Cholesky::new(matrix.clone()).expect("scaled identity is positive definite");
        Ok(Self {
            ridge,
            matrix,
            factor,
            log_det: dim as f64 * ridge.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(invalid(format!(
                "vector of length {len} does not match covariance dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Adds `φφᵀ` and returns the log-determinant increment `ln(1 + φᵀA⁻¹φ)`.
    pub fn rank_one_update(&mut self, phi: &DVector<f64>) -> Result<f64> {
        self.check_len(phi.len())?;
        if phi.norm() > 1.0 + tolerance::FEATURE_NORM {
            return Err(invalid(format!("feature norm {} exceeds 1", phi.norm())));
        }
        let quad = self.whiten_vector(phi).norm_squared();
        let increment = quad.ln_1p();
        self.factor.rank_one_update(phi, 1.0);
        self.matrix.ger(1.0, phi, phi, 1.0);
        self.log_det += increment;
        Ok(increment)
    }

    /// Adds a symmetric PSD `delta` and refactorizes from scratch.
    pub fn batch_merge(&mut self, delta: &DMatrix<f64>) -> Result<()> {
        if delta.nrows() != self.dim() || delta.ncols() != self.dim() {
            return Err(invalid(format!(
                "delta is {}x{}, covariance is {}x{}",
                delta.nrows(),
                delta.ncols(),
                self.dim(),
                self.dim()
            )));
        }
        let asym = (delta - delta.transpose()).amax();
        if !asym.is_finite() || asym > tolerance::PSD {
            return Err(invalid(format!("delta is not symmetric (max asymmetry {asym:e})")));
        }
        let min_eig = min_eigenvalue(delta);
        if min_eig < -tolerance::PSD {
            return Err(invalid(format!("delta is not PSD (smallest eigenvalue {min_eig:e})")));
        }
        let merged = symmetrize(&(&self.matrix + delta));
        if min_eigenvalue(&merged) < self.ridge - tolerance::EIGEN_FLOOR {
            return Err(invalid("merged covariance fell below the ridge floor"));
        }
        let factor = Cholesky::new(merged.clone())
            .ok_or_else(|| invalid("merged covariance is not positive definite"))?;
        self.log_det = factor.ln_determinant();
        self.factor = factor;
        self.matrix = merged;
        Ok(())
    }

    /// Folds a batch of outer products in through [`batch_merge`](Self::batch_merge).
    pub fn merge_outer_products<'a, I>(&mut self, phis: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let mut delta = DMatrix::zeros(self.dim(), self.dim());
        for phi in phis {
            self.check_len(phi.len())?;
            delta.ger(1.0, phi, phi, 1.0);
        }
        self.batch_merge(&delta)
    }

    /// `L⁻¹φ`, so that `‖L⁻¹φ‖² = φᵀA⁻¹φ`.
    fn whiten_vector(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.factor
            .l_dirty()
            .solve_lower_triangular(phi)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `‖φ‖_{A⁻¹} = sqrt(φᵀA⁻¹φ)`.
    pub fn ellipsoid_norm(&self, phi: &DVector<f64>) -> Result<f64> {
        self.check_len(phi.len())?;
        Ok(self.whiten_vector(phi).norm())
    }

    /// `Φᵀ A⁻¹ Φ` for a `d × c` block of features.
    pub fn inverse_quadratic_form(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(features.nrows())?;
        let white = self
            .factor
            .l_dirty()
            .solve_lower_triangular(features)
            .expect("cholesky factor has a positive diagonal");
        Ok(white.transpose() * white)
    }

    /// `A⁻¹ · acc`, one ridge solution per accumulator column.
    pub fn ridge_solve(&self, acc: &DesignAccumulator) -> Result<DMatrix<f64>> {
        self.check_len(acc.dim())?;
        Ok(self.factor.solve(acc.values()))
    }

    /// Single-column convenience over [`ridge_solve`](Self::ridge_solve).
    pub fn solve_vector(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(rhs.len())?;
        Ok(self.factor.solve(rhs))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.matrix)
    }
}

/// `ln det(numerator) − ln det(denominator)` from the cached values.
pub fn log_det_ratio(
    numerator: &RegularizedCovariance,
    denominator: &RegularizedCovariance,
) -> Result<f64> {
    if numerator.dim() != denominator.dim() {
        return Err(invalid(format!(
            "dimension mismatch in log-det ratio: {} vs {}",
            numerator.dim(),
            denominator.dim()
        )));
    }
    if numerator.ridge() != denominator.ridge() {
        return Err(invalid("log-det ratio of covariances with different ridges"));
    }
    Ok(numerator.log_det() - denominator.log_det())
}

/// Running `Σ_τ φ_τ y_τᵀ` with a fixed number of target columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignAccumulator {
    values: DMatrix<f64>,
}

impl DesignAccumulator {
    pub fn new(dim: usize, width: usize) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(invalid("accumulator dimension and width must be positive"));
        }
        Ok(Self {
            values: DMatrix::zeros(dim, width),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Adds `φ yᵀ` where `targets` has one entry per column.
    pub fn add(&mut self, phi: &DVector<f64>, targets: &[f64]) -> Result<()> {
        if phi.len() != self.dim() || targets.len() != self.width() {
            return Err(invalid(format!(
                "accumulator expects ({}, {}), got ({}, {})",
                self.dim(),
                self.width(),
                phi.len(),
                targets.len()
            )));
        }
        if !targets.iter().all(|y| y.is_finite()) {
            return Err(invalid("non-finite regression target"));
        }
        for (j, y) in targets.iter().enumerate() {
            self.values.column_mut(j).axpy(*y, phi, 1.0);
        }
        Ok(())
    }

    /// Adds `φ y` to a width-one accumulator.
    pub fn add_scalar(&mut self, phi: &DVector<f64>, target: f64) -> Result<()> {
        self.add(phi, &[target])
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}
