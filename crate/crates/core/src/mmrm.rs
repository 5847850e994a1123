//! Group-specific MMRM estimation for monotone missing data.
//!
//! Each arm follows `Y | X ~ N_T((x'b_1, ..., x'b_T)', Sigma)` with
//! unstructured covariance. Under a monotone pattern the observed-data
//! likelihood factorizes into per-visit regressions of `y_k` on
//! `(1, x, y_1, ..., y_{k-1})` over the subjects still observed at visit k,
//! so the (weighted) maximum-likelihood estimate is computed exactly by
//! weighted least squares per visit and then transformed back to the
//! `(Beta, Sigma)` moment parametrization. Residual variances use ML scaling
//! (denominator = total weight), matching the pseudo-MLE score equations.
//!
//! The same routine with subject weights is the refit step of the weighted
//! bootstrap; [`FitWorkspace`] caches the per-visit design rows so repeated
//! refits on the same dataset only redo the weighted accumulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Group, TrialDataset};

#[derive(Debug, Error)]
pub enum MmrmError {
    #[error("{group} group, visit {visit}: {rows} usable rows, need at least {needed}")]
    InsufficientData {
        group: Group,
        visit: usize,
        rows: usize,
        needed: usize,
    },
    #[error("{group} group, visit {visit}: sequential design is rank deficient")]
    RankDeficient { group: Group, visit: usize },
    #[error("{group} group, visit {visit}: residual variance is not strictly positive")]
    DegenerateResidual { group: Group, visit: usize },
    #[error("subject weight {index} is {value}; weights must be finite and nonnegative")]
    BadWeight { index: usize, value: f64 },
    #[error("weights length {got} does not match {expected} subjects")]
    WeightLength { expected: usize, got: usize },
    #[error("fit has {fit} visits / {fit_p} covariates, dataset has {data} / {data_p}")]
    ShapeMismatch {
        fit: usize,
        fit_p: usize,
        data: usize,
        data_p: usize,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One step of the sequential parametrization: the regression of `y_k` on
/// `(1, x, y_1..y_{k-1})` and its residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqStep {
    pub coef: DVector<f64>,
    pub resid_var: f64,
}

/// Fitted parameters for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    /// T x (p+1) coefficient matrix, row k = beta_{k+1}, intercept first.
    pub beta: DMatrix<f64>,
    /// T x T unstructured covariance.
    pub sigma: DMatrix<f64>,
    /// Sequential parametrization, one step per visit.
    pub seq: Vec<SeqStep>,
}

/// The model parameter estimate theta-hat for both arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmrmFit {
    pub groups: [GroupFit; 2],
    pub n_visits: usize,
    pub n_covariates: usize,
    /// Weighted observed-data log-likelihood at the estimate; `None` for
    /// parameter sets assembled from known moments rather than fitted.
    pub loglik: Option<f64>,
}

impl MmrmFit {
    pub fn group(&self, g: Group) -> &GroupFit {
        &self.groups[g.index()]
    }

    /// Mean vector `(x'b_1, ..., x'b_T)'` for a design row `(1, x')'`.
    pub fn mean_for(&self, g: Group, design_row: &DVector<f64>) -> DVector<f64> {
        self.group(g).beta.clone() * design_row
    }

    /// Assembles a parameter set directly from moment parameters, deriving
    /// the sequential parametrization. Used for simulation truths and tests.
    pub fn from_moments(
        beta: [DMatrix<f64>; 2],
        sigma: [DMatrix<f64>; 2],
    ) -> Result<Self, MmrmError> {
        let n_visits = beta[0].nrows();
        let n_covariates = beta[0].ncols() - 1;
        let mk = |i: usize, beta: &DMatrix<f64>, sigma: &DMatrix<f64>| -> Result<GroupFit, MmrmError> {
            let seq = moments_to_seq(beta, sigma).ok_or(MmrmError::RankDeficient {
                group: Group::ALL[i],
                visit: 0,
            })?;
            Ok(GroupFit {
                beta: beta.clone(),
                sigma: sigma.clone(),
                seq,
            })
        };
        Ok(Self {
            groups: [mk(0, &beta[0], &sigma[0])?, mk(1, &beta[1], &sigma[1])?],
            n_visits,
            n_covariates,
            loglik: None,
        })
    }

    pub fn to_json(&self) -> Result<String, MmrmError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MmrmError> {
        Ok(serde_json::from_str(s)?)
    }

    /// FNV-1a hash of all parameter bits; stable across runs and platforms
    /// with identical IEEE-754 doubles.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for g in &self.groups {
            g.beta.iter().for_each(|&x| eat(x));
            g.sigma.iter().for_each(|&x| eat(x));
            for step in &g.seq {
                step.coef.iter().for_each(|&x| eat(x));
                eat(step.resid_var);
            }
        }
        h
    }

    fn check_shape(&self, ds: &TrialDataset) -> Result<(), MmrmError> {
        if self.n_visits != ds.n_visits() || self.n_covariates != ds.n_covariates() {
            return Err(MmrmError::ShapeMismatch {
                fit: self.n_visits,
                fit_p: self.n_covariates,
                data: ds.n_visits(),
                data_p: ds.n_covariates(),
            });
        }
        Ok(())
    }
}

/// Cached per-visit design rows for one dataset, so bootstrap refits only
/// redo the weighted normal-equation accumulation.
pub struct FitWorkspace<'a> {
    ds: &'a TrialDataset,
    /// Indexed `[group][visit]`; rows of `(subject, design, outcome)` where
    /// the design has `1 + p + visit` entries.
    visits: [Vec<VisitBlock>; 2],
}

struct VisitBlock {
    subjects: Vec<usize>,
    design: Vec<f64>, // row-major, width = q
    outcome: Vec<f64>,
    width: usize,
}

impl<'a> FitWorkspace<'a> {
    pub fn new(ds: &'a TrialDataset) -> Self {
        let p = ds.n_covariates();
        let t = ds.n_visits();
        let mut visits: [Vec<VisitBlock>; 2] = [Vec::new(), Vec::new()];
        for blocks in &mut visits {
            for k in 1..=t {
                let q = p + k; // intercept + covariates + (k-1) prior outcomes
                blocks.push(VisitBlock {
                    subjects: Vec::new(),
                    design: Vec::new(),
                    outcome: Vec::new(),
                    width: q,
                });
            }
        }
        for (i, s) in ds.subjects().iter().enumerate() {
            let g = s.group.index();
            for k in 1..=s.n_observed() {
                let block = &mut visits[g][k - 1];
                block.subjects.push(i);
                block.design.push(1.0);
                block.design.extend(s.covariates.iter());
                block.design.extend(&s.outcomes[..k - 1]);
                block.outcome.push(s.outcomes[k - 1]);
            }
        }
        Self { ds, visits }
    }

    pub fn dataset(&self) -> &TrialDataset {
        self.ds
    }

    /// Weighted ML fit; `None` weights mean all ones (and take the same code
    /// path, so the two agree exactly).
    pub fn fit(&self, weights: Option<&[f64]>) -> Result<MmrmFit, MmrmError> {
        let n = self.ds.n_subjects();
        if let Some(w) = weights {
            if w.len() != n {
                return Err(MmrmError::WeightLength {
                    expected: n,
                    got: w.len(),
                });
            }
            for (i, &wi) in w.iter().enumerate() {
                if !wi.is_finite() || wi < 0.0 {
                    return Err(MmrmError::BadWeight { index: i, value: wi });
                }
            }
        }
        let p = self.ds.n_covariates();
        let t = self.ds.n_visits();
        let weight_of = |i: usize| weights.map_or(1.0, |w| w[i]);

        let mut groups = Vec::with_capacity(2);
        for g in Group::ALL {
            let mut seq = Vec::with_capacity(t);
            for k in 1..=t {
                let block = &self.visits[g.index()][k - 1];
                let rows = block
                    .subjects
                    .iter()
                    .filter(|&&i| weight_of(i) > 0.0)
                    .count();
                if rows < p + k + 1 {
                    return Err(MmrmError::InsufficientData {
                        group: g,
                        visit: k,
                        rows,
                        needed: p + k + 1,
                    });
                }
                let step = wls_step(block, &weight_of).ok_or(MmrmError::RankDeficient {
                    group: g,
                    visit: k,
                })?;
                if step.resid_var <= 0.0 || !step.resid_var.is_finite() {
                    return Err(MmrmError::DegenerateResidual { group: g, visit: k });
                }
                seq.push(step);
            }
            let (beta, sigma) = seq_to_moments(&seq, p);
            groups.push(GroupFit { beta, sigma, seq });
        }
        let mut fit = MmrmFit {
            groups: [groups.remove(0), groups.remove(0)],
            n_visits: t,
            n_covariates: p,
            loglik: None,
        };
        fit.loglik = Some(observed_loglik(&fit, self.ds, weights)?);
        Ok(fit)
    }
}

/// Observed-data weighted ML fit of the two-arm MMRM.
pub fn fit(ds: &TrialDataset, weights: Option<&[f64]>) -> Result<MmrmFit, MmrmError> {
    FitWorkspace::new(ds).fit(weights)
}

fn wls_step(block: &VisitBlock, weight_of: &dyn Fn(usize) -> f64) -> Option<SeqStep> {
    let q = block.width;
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut moment = DVector::<f64>::zeros(q);
    let mut total_weight = 0.0;
    for (r, &subject) in block.subjects.iter().enumerate() {
        let w = weight_of(subject);
        if w == 0.0 {
            continue;
        }
        let row = &block.design[r * q..(r + 1) * q];
        let y = block.outcome[r];
        total_weight += w;
        for a in 0..q {
            let wa = w * row[a];
            moment[a] += wa * y;
            for b in a..q {
                gram[(a, b)] += wa * row[b];
            }
        }
    }
    if total_weight <= 0.0 {
        return None;
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let chol = gram.cholesky()?;
    let coef = chol.solve(&moment);
    let mut wrss = 0.0;
    for (r, &subject) in block.subjects.iter().enumerate() {
        let w = weight_of(subject);
        if w == 0.0 {
            continue;
        }
        let row = &block.design[r * q..(r + 1) * q];
        let fitted: f64 = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        let e = block.outcome[r] - fitted;
        wrss += w * e * e;
    }
    Some(SeqStep {
        coef,
        resid_var: wrss / total_weight,
    })
}

/// Moment parameters implied by the sequential parametrization:
/// `beta_k = c_k + sum_l a_kl beta_l`, `Sigma_{k,l} = a_k' Sigma_{1:k-1,l}`,
/// `Sigma_{k,k} = a_k' Sigma_{1:k-1,1:k-1} a_k + s2_k`, where `c_k` is the
/// intercept/covariate part and `a_k` the prior-outcome part of step k.
pub fn seq_to_moments(seq: &[SeqStep], n_covariates: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = seq.len();
    let d = n_covariates + 1;
    let mut beta = DMatrix::<f64>::zeros(t, d);
    let mut sigma = DMatrix::<f64>::zeros(t, t);
    for (k, step) in seq.iter().enumerate() {
        let base = step.coef.rows(0, d).into_owned();
        let hist = step.coef.rows(d, k).into_owned();
        let mut row = base;
        for l in 0..k {
            row += hist[l] * beta.row(l).transpose();
        }
        beta.row_mut(k).copy_from(&row.transpose());
        for l in 0..k {
            let mut cov = 0.0;
            for lp in 0..k {
                cov += hist[lp] * sigma[(lp, l)];
            }
            sigma[(k, l)] = cov;
            sigma[(l, k)] = cov;
        }
        let mut var = step.resid_var;
        for a in 0..k {
            for b in 0..k {
                var += hist[a] * sigma[(a, b)] * hist[b];
            }
        }
        sigma[(k, k)] = var;
    }
    (beta, sigma)
}

/// Inverse transform: sequential steps implied by `(beta, sigma)`. Returns
/// `None` when a leading block of `sigma` is not positive definite.
pub fn moments_to_seq(beta: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Option<Vec<SeqStep>> {
    let t = beta.nrows();
    let d = beta.ncols();
    let mut seq = Vec::with_capacity(t);
    for k in 0..t {
        if k == 0 {
            seq.push(SeqStep {
                coef: beta.row(0).transpose(),
                resid_var: sigma[(0, 0)],
            });
            continue;
        }
        let s11 = sigma.view((0, 0), (k, k)).into_owned();
        let s12 = sigma.view((0, k), (k, 1)).into_owned();
        let chol = s11.cholesky()?;
        let hist = chol.solve(&s12); // a_k = Sigma_{1:k}^{-1} sigma_{1:k,k}
        let resid_var = sigma[(k, k)] - (s12.transpose() * &hist)[(0, 0)];
        let mut base = beta.row(k).transpose();
        for l in 0..k {
            base -= hist[(l, 0)] * beta.row(l).transpose();
        }
        let mut coef = DVector::zeros(d + k);
        coef.rows_mut(0, d).copy_from(&base);
        for l in 0..k {
            coef[d + l] = hist[(l, 0)];
        }
        seq.push(SeqStep { coef, resid_var });
    }
    Some(seq)
}

/// Weighted observed-data Gaussian log-likelihood: each subject contributes
/// `w_i log N(y_{1..k_i}; mu_{1..k_i}(x_i), Sigma_{1..k_i,1..k_i})` for its
/// own arm.
pub fn observed_loglik(
    fit: &MmrmFit,
    ds: &TrialDataset,
    weights: Option<&[f64]>,
) -> Result<f64, MmrmError> {
    fit.check_shape(ds)?;
    if let Some(w) = weights {
        if w.len() != ds.n_subjects() {
            return Err(MmrmError::WeightLength {
                expected: ds.n_subjects(),
                got: w.len(),
            });
        }
    }
    let t = ds.n_visits();
    // Cholesky and log-determinant of each leading block, per group.
    type BlockFactor = Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)>;
    let mut chols: [Vec<BlockFactor>; 2] = [vec![None; t], vec![None; t]];
    for (g, factors) in chols.iter_mut().enumerate() {
        for k in 1..=t {
            let block = fit.groups[g].sigma.view((0, 0), (k, k)).into_owned();
            if let Some(ch) = block.cholesky() {
                let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
                factors[k - 1] = Some((ch, logdet));
            }
        }
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for (i, s) in ds.subjects().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let g = s.group.index();
        let k = s.n_observed();
        let (chol, logdet) = chols[g][k - 1].as_ref().ok_or(MmrmError::RankDeficient {
            group: s.group,
            visit: k,
        })?;
        let design = s.design_row();
        let mu = fit.groups[g].beta.rows(0, k) * &design;
        let centered = DVector::from_iterator(k, s.outcomes.iter().zip(mu.iter()).map(|(y, m)| y - m));
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&centered)
            .expect("positive diagonal");
        total += w * (-0.5 * (k as f64 * ln2pi + logdet + z.norm_squared()));
    }
    Ok(total)
}
