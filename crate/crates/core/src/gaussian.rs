//! Multivariate normal primitives: validated laws, Schur-complement
//! conditioning, log-density, and sampling.
//!
//! Every statistical module works through [`GaussianLaw`]. Positive
//! definiteness is established once at construction via Cholesky and the
//! factor is reused for both sampling and density evaluation. Conditioning
//! on an observed sub-block goes through [`schur_conditional`], which also
//! guards against numerically singular observed blocks (reciprocal condition
//! estimate below 1e-12).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_core::RngCore;
use thiserror::Error;

use crate::rng::fill_standard_normal;

/// Relative symmetry tolerance for covariance inputs.
const SYMMETRY_TOL: f64 = 1e-10;

/// Reciprocal-condition threshold below which an observed block is treated
/// as singular. Trial covariance matrices are small (T <= ~10), so genuine
/// near-singularity signals upstream misuse rather than scale issues.
const RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("covariance not symmetric at ({i},{j}): |a - a'| = {delta:.3e}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("covariance is not positive definite (Cholesky failed)")]
    NotPositiveDefinite,
    #[error("observed block is numerically singular (rcond ~ {rcond:.3e})")]
    SingularBlock { rcond: f64 },
    #[error("invalid conditioning index set: {0}")]
    BadIndexSet(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A multivariate normal law with a cached lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianLaw {
    /// Validates symmetry (within 1e-10 relative) and positive definiteness,
    /// then caches the Cholesky factor.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussianError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(GaussianError::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        check_symmetric(&cov)?;
        // Work on the symmetrized matrix so the factorization is insensitive
        // to representable asymmetry within tolerance.
        let cov = 0.5 * (&cov + cov.transpose());
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(GaussianError::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
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

    /// Log of the determinant of the covariance.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Exact Gaussian log-density at `x` via the cached factor:
    /// `-(d ln 2pi + ln|cov| + z'z) / 2` with `z = L^{-1}(x - mean)`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "log_density dimension mismatch");
        let centered = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&centered)
            .expect("cholesky factor has positive diagonal");
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + z.norm_squared())
    }

    /// Log-density of a draw stored in a plain slice.
    pub fn log_density_slice(&self, x: &[f64]) -> f64 {
        self.log_density(&DVector::from_column_slice(x))
    }

    /// One draw `mean + L z` with `z` standard normal (Box-Muller).
    pub fn sample<R: RngCore>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    /// Draws into a preallocated slice of length `dim()`.
    pub fn sample_into<R: RngCore>(&self, rng: &mut R, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim(), "sample dimension mismatch");
        let d = self.dim();
        let mut z = vec![0.0; d];
        fill_standard_normal(rng, &mut z);
        let l = self.chol.l_dirty();
        // out = mean + L z over the lower triangle only.
        for i in 0..d {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += l[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    /// `n_draws` independent draws as the columns of a `dim x n_draws`
    /// matrix, reusing one scratch buffer.
    pub fn sample_matrix<R: RngCore>(&self, rng: &mut R, n_draws: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, n_draws);
        let mut z = vec![0.0; d];
        let l = self.chol.l_dirty();
        for m in 0..n_draws {
            fill_standard_normal(rng, &mut z);
            for i in 0..d {
                let mut acc = self.mean[i];
                for j in 0..=i {
                    acc += l[(i, j)] * z[j];
                }
                out[(i, m)] = acc;
            }
        }
        out
    }

    /// Conditional law of the unobserved coordinates given
    /// `x[observed_idx] = observed_vals` (0-based indices).
    pub fn condition(
        &self,
        observed_idx: &[usize],
        observed_vals: &[f64],
    ) -> Result<GaussianLaw, GaussianError> {
        if observed_vals.len() != observed_idx.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: observed_idx.len(),
                got: observed_vals.len(),
            });
        }
        let mis_idx = complement(observed_idx, self.dim())?;
        let mu_obs = DVector::from_iterator(
            observed_idx.len(),
            observed_idx.iter().map(|&i| self.mean[i]),
        );
        let mu_mis =
            DVector::from_iterator(mis_idx.len(), mis_idx.iter().map(|&i| self.mean[i]));
        let y_obs = DVector::from_column_slice(observed_vals);
        let (mean, cov) =
            schur_conditional(&self.cov, observed_idx, &mis_idx, &mu_obs, &mu_mis, &y_obs)?;
        GaussianLaw::new(mean, cov)
    }
}

/// Conditional mean and covariance of the `mis_idx` block given the
/// `obs_idx` block, with caller-supplied mean vectors for the two blocks:
///
/// `mean = mu_mis + S21 S11^{-1} (y_obs - mu_obs)`,
/// `cov  = S22 - S21 S11^{-1} S12`.
///
/// Letting the caller supply the block means is what allows sensitivity
/// models to pair one group's regression structure with another group's
/// mean profile.
pub fn schur_conditional(
    cov: &DMatrix<f64>,
    obs_idx: &[usize],
    mis_idx: &[usize],
    mu_obs: &DVector<f64>,
    mu_mis: &DVector<f64>,
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), GaussianError> {
    let s11 = cov.select_rows(obs_idx).select_columns(obs_idx);
    let s12 = cov.select_rows(obs_idx).select_columns(mis_idx);
    let s22 = cov.select_rows(mis_idx).select_columns(mis_idx);

    let chol = s11
        .clone()
        .cholesky()
        .ok_or(GaussianError::NotPositiveDefinite)?;
    let rcond = 1.0 / (norm1(&s11) * norm1(&chol.inverse()));
    if !rcond.is_finite() || rcond < RCOND_MIN {
        return Err(GaussianError::SingularBlock { rcond });
    }

    // A' = S11^{-1} S12, so A = S21 S11^{-1}.
    let a_t = chol.solve(&s12);
    let innovation = y_obs - mu_obs;
    let mean = mu_mis + a_t.transpose() * innovation;
    let cov_cond = &s22 - a_t.transpose() * &s12;
    let cov_cond = 0.5 * (&cov_cond + cov_cond.transpose());
    Ok((mean, cov_cond))
}

/// Regression operator `S21 S11^{-1}` and conditional covariance for a
/// leading observed block of size `k` (the monotone-dropout case). Shared by
/// the sensitivity models so the Schur algebra lives in one place.
pub fn leading_block_operator(
    cov: &DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GaussianError> {
    let d = cov.nrows();
    assert!(k > 0 && k < d, "leading block size out of range");
    let s11 = cov.view((0, 0), (k, k)).into_owned();
    let s12 = cov.view((0, k), (k, d - k)).into_owned();
    let s22 = cov.view((k, k), (d - k, d - k)).into_owned();
    let chol = s11
        .clone()
        .cholesky()
        .ok_or(GaussianError::NotPositiveDefinite)?;
    let rcond = 1.0 / (norm1(&s11) * norm1(&chol.inverse()));
    if !rcond.is_finite() || rcond < RCOND_MIN {
        return Err(GaussianError::SingularBlock { rcond });
    }
    let reg_op = chol.solve(&s12).transpose();
    let cov_cond = &s22 - &reg_op * &s12;
    Ok((reg_op, 0.5 * (&cov_cond + cov_cond.transpose())))
}

fn check_symmetric(cov: &DMatrix<f64>) -> Result<(), GaussianError> {
    let scale = cov.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let delta = (cov[(i, j)] - cov[(j, i)]).abs();
            if delta > SYMMETRY_TOL * scale {
                return Err(GaussianError::NotSymmetric { i, j, delta });
            }
        }
    }
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(GaussianError::NotPositiveDefinite);
    }
    Ok(())
}

fn complement(observed_idx: &[usize], d: usize) -> Result<Vec<usize>, GaussianError> {
    if observed_idx.is_empty() {
        return Err(GaussianError::BadIndexSet("empty observed set".into()));
    }
    let mut seen = vec![false; d];
    for &i in observed_idx {
        if i >= d {
            return Err(GaussianError::BadIndexSet(format!(
                "index {i} out of range for dimension {d}"
            )));
        }
        if seen[i] {
            return Err(GaussianError::BadIndexSet(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    let mis: Vec<usize> = (0..d).filter(|&i| !seen[i]).collect();
    if mis.is_empty() {
        return Err(GaussianError::BadIndexSet(
            "observed set covers all coordinates".into(),
        ));
    }
    Ok(mis)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
