//! Per-subject Gaussian imputation laws under the four sensitivity models.
//!
//! For a subject who drops out after visit k, the models specify the law of
//! the unobserved visits given the observed ones:
//!
//! * **MAR** - condition the subject's own-arm law on visits 1..k.
//! * **J2R** (jump to reference) - control-arm covariance partitions supply
//!   both the regression operator and the residual covariance; the missing
//!   block's mean profile comes from the control arm's coefficients while
//!   the observed block keeps the subject's own-arm profile. Control
//!   subjects therefore reduce exactly to MAR.
//! * **RTB** (return to baseline) - only the final visit is imputed, from
//!   the subject's own-arm marginal baseline law; observed post-baseline
//!   outcomes do not enter.
//! * **Washout** - MAR for control subjects, RTB for treatment subjects.
//!
//! RTB and washout impute the final visit only, so estimands touching
//! intermediate missing visits are not defined under them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Group, TrialDataset};
use crate::gaussian::{leading_block_operator, GaussianError, GaussianLaw};
use crate::mmrm::MmrmFit;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("subject {subject} is complete; no imputation law exists")]
    CompleteSubject { subject: usize },
    #[error("gaussian failure for subject {subject}, pattern {pattern}: {source}")]
    Law {
        subject: usize,
        pattern: usize,
        source: GaussianError,
    },
    #[error("model construction: {0}")]
    Construction(#[from] GaussianError),
}

/// Sensitivity model selecting the imputation law family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityModel {
    Mar,
    J2r,
    Rtb,
    Washout,
}

impl SensitivityModel {
    pub const ALL: [SensitivityModel; 4] = [
        SensitivityModel::Mar,
        SensitivityModel::J2r,
        SensitivityModel::Rtb,
        SensitivityModel::Washout,
    ];
}

impl fmt::Display for SensitivityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SensitivityModel::Mar => "mar",
            SensitivityModel::J2r => "j2r",
            SensitivityModel::Rtb => "rtb",
            SensitivityModel::Washout => "washout",
        };
        write!(f, "{s}")
    }
}

impl FromStr for SensitivityModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mar" => Ok(SensitivityModel::Mar),
            "j2r" => Ok(SensitivityModel::J2r),
            "rtb" => Ok(SensitivityModel::Rtb),
            "washout" => Ok(SensitivityModel::Washout),
            other => Err(format!(
                "unknown sensitivity model '{other}' (expected mar|j2r|rtb|washout)"
            )),
        }
    }
}

/// The imputation law for one incomplete subject.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    pub subject: usize,
    /// 1-based visit indices covered by the law, in order. Either
    /// `k+1..=T` (conditional models) or `[T]` (baseline models).
    pub visits: Vec<usize>,
    pub law: GaussianLaw,
}

/// How one (group, pattern) cell builds its law.
enum PatternOp {
    /// Conditional Gaussian: mean source matrices plus the precomputed
    /// regression operator and residual covariance.
    Conditional {
        /// `S21 S11^{-1}`, (T-k) x k.
        reg_op: DMatrix<f64>,
        cond_cov: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
        log_det: f64,
        /// Arm supplying the missing-block mean profile (rows k+1..T).
        mis_mean_arm: Group,
    },
    /// Marginal baseline law for the final visit only.
    Baseline { var: f64 },
}

/// Precomputed per-(group, pattern) structure for a given fit and model.
/// Law construction per subject is then a small matrix-vector product, which
/// is what makes the bootstrap's per-replicate reweighting cheap.
pub struct LawEngine<'a> {
    fit: &'a MmrmFit,
    model: SensitivityModel,
    /// `patterns[group][k-1]` for k = 1..T-1.
    patterns: [Vec<PatternOp>; 2],
}

impl<'a> LawEngine<'a> {
    pub fn new(fit: &'a MmrmFit, model: SensitivityModel) -> Result<Self, SensitivityError> {
        let t = fit.n_visits;
        let mut patterns: [Vec<PatternOp>; 2] = [Vec::new(), Vec::new()];
        for g in Group::ALL {
            for k in 1..t {
                patterns[g.index()].push(Self::build_op(fit, model, g, k)?);
            }
        }
        Ok(Self {
            fit,
            model,
            patterns,
        })
    }

    pub fn model(&self) -> SensitivityModel {
        self.model
    }

    fn build_op(
        fit: &MmrmFit,
        model: SensitivityModel,
        g: Group,
        k: usize,
    ) -> Result<PatternOp, SensitivityError> {
        let conditional = |sigma: &DMatrix<f64>, mis_mean_arm: Group| {
            let (reg_op, cond_cov) = leading_block_operator(sigma, k)?;
            let chol = cond_cov
                .clone()
                .cholesky()
                .ok_or(GaussianError::NotPositiveDefinite)?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Ok::<_, GaussianError>(PatternOp::Conditional {
                reg_op,
                cond_cov,
                chol,
                log_det,
                mis_mean_arm,
            })
        };
        let baseline = || PatternOp::Baseline {
            var: fit.group(g).sigma[(0, 0)],
        };
        let op = match (model, g) {
            (SensitivityModel::Mar, _) => conditional(&fit.group(g).sigma, g)?,
            (SensitivityModel::J2r, _) => {
                conditional(&fit.group(Group::Control).sigma, Group::Control)?
            }
            (SensitivityModel::Rtb, _) => baseline(),
            (SensitivityModel::Washout, Group::Control) => {
                conditional(&fit.group(Group::Control).sigma, Group::Control)?
            }
            (SensitivityModel::Washout, Group::Treatment) => baseline(),
        };
        Ok(op)
    }

    /// Mean vector of the law for an incomplete subject, plus its pattern.
    fn law_mean(&self, ds: &TrialDataset, subject: usize) -> Result<DVector<f64>, SensitivityError> {
        let s = ds.subject(subject);
        let k = s.n_observed();
        if k == ds.n_visits() {
            return Err(SensitivityError::CompleteSubject { subject });
        }
        Ok(self.law_mean_parts(s.group, k, &s.design_row(), &s.outcomes))
    }

    fn law_mean_parts(
        &self,
        group: Group,
        k: usize,
        design: &DVector<f64>,
        observed: &[f64],
    ) -> DVector<f64> {
        let t = self.fit.n_visits;
        match &self.patterns[group.index()][k - 1] {
            PatternOp::Conditional {
                reg_op,
                mis_mean_arm,
                ..
            } => {
                let mu_obs = self.fit.group(group).beta.rows(0, k) * design;
                let mu_mis = self.fit.group(*mis_mean_arm).beta.rows(k, t - k) * design;
                let innovation = DVector::from_iterator(
                    k,
                    observed.iter().zip(mu_obs.iter()).map(|(y, m)| y - m),
                );
                mu_mis + reg_op * innovation
            }
            PatternOp::Baseline { .. } => {
                let mu = self.fit.group(group).beta.row(0) * design;
                DVector::from_column_slice(&[mu[(0, 0)]])
            }
        }
    }

    /// Conditional mean and standard deviation of the final visit for a
    /// dropout at pattern `k` with the given design row and observed
    /// outcomes. Used where only the endpoint margin of the law is needed.
    pub fn endpoint_conditional(
        &self,
        group: Group,
        k: usize,
        design: &DVector<f64>,
        observed: &[f64],
    ) -> (f64, f64) {
        assert!(k >= 1 && k < self.fit.n_visits, "pattern out of range");
        let mean = self.law_mean_parts(group, k, design, observed);
        let sd = match &self.patterns[group.index()][k - 1] {
            PatternOp::Conditional { cond_cov, .. } => {
                let d = cond_cov.nrows();
                cond_cov[(d - 1, d - 1)].sqrt()
            }
            PatternOp::Baseline { var } => var.sqrt(),
        };
        (mean[mean.len() - 1], sd)
    }

    /// Full law (mean + covariance) for an incomplete subject.
    pub fn law_for(
        &self,
        ds: &TrialDataset,
        subject: usize,
    ) -> Result<ConditionalLaw, SensitivityError> {
        let s = ds.subject(subject);
        let k = s.n_observed();
        let t = ds.n_visits();
        let mean = self.law_mean(ds, subject)?;
        let (visits, cov) = match &self.patterns[s.group.index()][k - 1] {
            PatternOp::Conditional { cond_cov, .. } => {
                ((k + 1..=t).collect::<Vec<_>>(), cond_cov.clone())
            }
            PatternOp::Baseline { var } => (vec![t], DMatrix::from_element(1, 1, *var)),
        };
        let law = GaussianLaw::new(mean, cov).map_err(|source| SensitivityError::Law {
            subject,
            pattern: k,
            source,
        })?;
        Ok(ConditionalLaw {
            subject,
            visits,
            law,
        })
    }

    /// Log-density of each column of `draws` under the subject's law,
    /// reusing the pattern-level Cholesky factor. `draws` is d x M.
    pub fn log_density_of_draws(
        &self,
        ds: &TrialDataset,
        subject: usize,
        draws: &DMatrix<f64>,
        out: &mut [f64],
    ) -> Result<(), SensitivityError> {
        debug_assert_eq!(draws.ncols(), out.len());
        let s = ds.subject(subject);
        let k = s.n_observed();
        let mean = self.law_mean(ds, subject)?;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        match &self.patterns[s.group.index()][k - 1] {
            PatternOp::Conditional { chol, log_det, .. } => {
                let d = mean.len();
                debug_assert_eq!(draws.nrows(), d);
                let mut centered = draws.clone();
                for mut col in centered.column_iter_mut() {
                    col -= &mean;
                }
                let l = chol.l_dirty();
                l.solve_lower_triangular_mut(&mut centered);
                let constant = -0.5 * (d as f64 * ln2pi + log_det);
                for (m, col) in centered.column_iter().enumerate() {
                    out[m] = constant - 0.5 * col.norm_squared();
                }
            }
            PatternOp::Baseline { var } => {
                debug_assert_eq!(draws.nrows(), 1);
                let constant = -0.5 * (ln2pi + var.ln());
                for (o, value) in out.iter_mut().zip(draws.row(0).iter()) {
                    let z = value - mean[0];
                    *o = constant - 0.5 * z * z / var;
                }
            }
        }
        Ok(())
    }
}

/// The imputation law for one subject under `model` (the one-off entry
/// point; batch callers build a [`LawEngine`] once).
pub fn imputation_law(
    fit: &MmrmFit,
    ds: &TrialDataset,
    subject: usize,
    model: SensitivityModel,
) -> Result<ConditionalLaw, SensitivityError> {
    LawEngine::new(fit, model)?.law_for(ds, subject)
}

/// True iff every incomplete control subject has parameter-identical J2R
/// and MAR laws (within 1e-12). This is structural under the model
/// definitions; the check exists as a regression guard.
pub fn mar_control_equivalence_check(fit: &MmrmFit, ds: &TrialDataset) -> bool {
    let mar = match LawEngine::new(fit, SensitivityModel::Mar) {
        Ok(e) => e,
        Err(_) => return false,
    };
    let j2r = match LawEngine::new(fit, SensitivityModel::J2r) {
        Ok(e) => e,
        Err(_) => return false,
    };
    for i in 0..ds.n_subjects() {
        if ds.subject(i).group != Group::Control || ds.pattern_of(i).is_complete {
            continue;
        }
        let (a, b) = match (mar.law_for(ds, i), j2r.law_for(ds, i)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return false,
        };
        if a.visits != b.visits {
            return false;
        }
        let mean_close = a
            .law
            .mean()
            .iter()
            .zip(b.law.mean().iter())
            .all(|(x, y)| (x - y).abs() <= 1e-12);
        let cov_close = a
            .law
            .cov()
            .iter()
            .zip(b.law.cov().iter())
            .all(|(x, y)| (x - y).abs() <= 1e-12);
        if !mean_close || !cov_close {
            return false;
        }
    }
    true
}
