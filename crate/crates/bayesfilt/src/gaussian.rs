//! Gaussian beliefs and the matrix routines the filters lean on.
//!
//! All covariance handling funnels through two knobs: matrices are
//! re-symmetrized as `(C + Cᵀ)/2` before factorization, and eigenvalues are
//! floored at [`EIG_FLOOR_REL`]` · trace` when a Cholesky factorization is not
//! available. Eigenvalues below `-`[`INDEFINITE_TOL_REL`]` · trace` are treated
//! as genuine indefiniteness and reported as errors rather than silently
//! repaired.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::FilterError;
use crate::Result;

/// Relative eigenvalue floor applied when repairing a semi-definite matrix.
pub const EIG_FLOOR_REL: f64 = 1e-12;

/// Tolerance below which a negative eigenvalue is considered a hard numerical
/// failure instead of roundoff, relative to the spectral scale `max|λ|`.
/// Posterior covariances of the form `P − K·P_yy·Kᵀ` cancel to roundoff dust
/// when state blocks differ in scale by many decades, and that dust is small
/// against the largest eigenvalue, not against the trace of the block it
/// lands in; genuine divergence shows eigenvalues orders of magnitude below
/// this bound (or non-finite entries, caught separately).
pub const INDEFINITE_TOL_REL: f64 = 1e-7;

/// `(C + Cᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Compensated (Kahan) sum: error stays O(ε) regardless of length, so
/// normalization checks do not degrade with ensemble size.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

fn check_square(context: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(FilterError::dims(context, m.nrows(), m.ncols()));
    }
    Ok(())
}

/// Lower-triangular (or, for semi-definite input, square-root) factor `S`
/// with `S Sᵀ = cov`.
///
/// Positive-definite matrices go through Cholesky. Semi-definite ones fall
/// back to a symmetric eigendecomposition with the eigenvalue floor; the
/// returned factor is then `V·diag(√λ)` and no longer triangular, which is
/// fine for every use in this crate (sigma points, sampling).
pub fn matrix_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square("matrix_sqrt", cov)?;
    let sym = symmetrize(cov);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.l());
    }
    let trace = sym.trace();
    let eig = nalgebra::SymmetricEigen::new(sym);
    let floor = EIG_FLOOR_REL * trace.abs();
    let spectral = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let neg_tol = INDEFINITE_TOL_REL * spectral;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -neg_tol {
            return Err(FilterError::Numerical(format!(
                "indefinite covariance: eigenvalue {v:.3e} below tolerance -{neg_tol:.3e}"
            )));
        }
        *v = v.max(floor);
    }
    let sqrt_vals = vals.map(|v| v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

/// Precomputed factorization of a covariance for repeated density evaluation.
///
/// Built once per (step, noise matrix) and reused across a whole particle
/// ensemble.
#[derive(Debug, Clone)]
pub struct DensityFactor {
    kind: FactorKind,
    log_det_half: f64,
    dim: usize,
}

#[derive(Debug, Clone)]
enum FactorKind {
    Chol(DMatrix<f64>),
    Eigen {
        vectors: DMatrix<f64>,
        inv_sqrt_vals: DVector<f64>,
    },
}

impl DensityFactor {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        check_square("DensityFactor", cov)?;
        let dim = cov.nrows();
        let sym = symmetrize(cov);
        if let Some(chol) = sym.clone().cholesky() {
            let l = chol.l();
            let log_det_half = l.diagonal().iter().map(|d| d.ln()).sum();
            return Ok(Self {
                kind: FactorKind::Chol(l),
                log_det_half,
                dim,
            });
        }
        let trace = sym.trace();
        let eig = nalgebra::SymmetricEigen::new(sym);
        let floor = EIG_FLOOR_REL * trace.abs();
        let spectral = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let neg_tol = INDEFINITE_TOL_REL * spectral;
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -neg_tol {
                return Err(FilterError::Numerical(format!(
                    "indefinite covariance in density: eigenvalue {v:.3e}"
                )));
            }
            *v = v.max(floor);
            if *v <= 0.0 {
                return Err(FilterError::Numerical(
                    "singular covariance: density undefined even after flooring".into(),
                ));
            }
        }
        let log_det_half = 0.5 * vals.iter().map(|v| v.ln()).sum::<f64>();
        let inv_sqrt_vals = vals.map(|v| 1.0 / v.sqrt());
        Ok(Self {
            kind: FactorKind::Eigen {
                vectors: eig.eigenvectors,
                inv_sqrt_vals,
            },
            log_det_half,
            dim,
        })
    }

    /// Squared Mahalanobis distance of a residual.
    pub fn mahalanobis_sq(&self, residual: &DVector<f64>) -> f64 {
        let z = match &self.kind {
            FactorKind::Chol(l) => l
                .solve_lower_triangular(residual)
                .unwrap_or_else(|| DVector::from_element(self.dim, f64::INFINITY)),
            FactorKind::Eigen {
                vectors,
                inv_sqrt_vals,
            } => {
                let mut z = vectors.transpose() * residual;
                z.component_mul_assign(inv_sqrt_vals);
                z
            }
        };
        z.norm_squared()
    }

    /// Log-density of `N(residual; 0, cov)`.
    pub fn log_density(&self, residual: &DVector<f64>) -> f64 {
        let d = self.dim as f64;
        -0.5 * self.mahalanobis_sq(residual)
            - self.log_det_half
            - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Gaussian belief `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Build a belief; the covariance is symmetrized on entry.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(FilterError::dims("GaussianBelief", mean.len(), cov.nrows()));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::Numerical(
                "non-finite entry in belief mean or covariance".into(),
            ));
        }
        Ok(Self {
            mean,
            cov: symmetrize(&cov),
        })
    }

    /// Belief with a diagonal covariance.
    pub fn from_diag(mean: DVector<f64>, diag: &DVector<f64>) -> Result<Self> {
        if mean.len() != diag.len() {
            return Err(FilterError::dims("from_diag", mean.len(), diag.len()));
        }
        let cov = DMatrix::from_diagonal(diag);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal standard deviations (square roots of the covariance diagonal,
    /// negatives clamped to zero).
    pub fn marginal_std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Log-density at `x`. Errors if the covariance is singular beyond the
    /// regularization floor.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(FilterError::dims("log_density", self.dim(), x.len()));
        }
        let factor = DensityFactor::new(&self.cov)?;
        Ok(factor.log_density(&(x - &self.mean)))
    }

    /// Draw one sample. A zero covariance returns the mean.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let s = matrix_sqrt(&self.cov)?;
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + s * z)
    }

    /// Draw `n` samples.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let s = matrix_sqrt(&self.cov)?;
        Ok((0..n)
            .map(|_| {
                let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.mean + &s * z
            })
            .collect())
    }
}

/// Mean and covariance of a weighted point set, with one weight list used for
/// both moments. Weights must be normalized.
pub fn weighted_moments(points: &[DVector<f64>], weights: &[f64]) -> Result<GaussianBelief> {
    if points.is_empty() {
        return Err(FilterError::Config(
            "weighted_moments: empty point set".into(),
        ));
    }
    let sum = kahan_sum(weights.iter().copied());
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-12 {
        return Err(FilterError::Config(format!(
            "weighted_moments: weights sum to {sum}, expected 1"
        )));
    }
    weighted_moments_split(points, weights, weights)
}

/// Moments with separate mean and covariance weight lists, as the unscented
/// transform requires (its covariance weights do not sum to one).
pub fn weighted_moments_split(
    points: &[DVector<f64>],
    mean_weights: &[f64],
    cov_weights: &[f64],
) -> Result<GaussianBelief> {
    if points.is_empty() {
        return Err(FilterError::Config(
            "weighted_moments: empty point set".into(),
        ));
    }
    if points.len() != mean_weights.len() || points.len() != cov_weights.len() {
        return Err(FilterError::dims(
            "weighted_moments: weights",
            points.len(),
            mean_weights.len().min(cov_weights.len()),
        ));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(FilterError::dims("weighted_moments: points", dim, 0));
    }
    if mean_weights
        .iter()
        .chain(cov_weights.iter())
        .any(|w| !w.is_finite())
    {
        return Err(FilterError::Numerical(
            "weighted_moments: non-finite weight".into(),
        ));
    }
    let mut mean = DVector::zeros(dim);
    for (p, &w) in points.iter().zip(mean_weights) {
        mean.axpy(w, p, 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (p, &w) in points.iter().zip(cov_weights) {
        let d = p - &mean;
        cov.ger(w, &d, &d, 1.0);
    }
    GaussianBelief::new(mean, symmetrize(&cov))
}
