//! Treatment-effect estimands and their estimating-equation solvers.
//!
//! Every estimand is defined through a per-group moment condition on the
//! endpoint (visit T). Under distributional imputation the pooled dataset
//! carries weight 1 on each observed endpoint and weight 1/M (or an
//! importance weight) on each draw, and one joint solve produces the DI
//! estimate; under MI the same solvers run once per completed dataset.
//!
//! * simple ATE - weighted group means of the pooled endpoint;
//! * ANCOVA ATE - least squares of the pooled endpoint on
//!   `(x', 1{treated} x')'` with the overall covariate mean supplying the
//!   contrast, which is what makes it more efficient than the group-mean
//!   form;
//! * risk difference - weighted group tail proportions at a threshold;
//! * QTE - left-continuous generalized inverse of the pooled weighted
//!   empirical CDF (the indicator equation has no exact root on step
//!   functions, so the smallest t reaching the target mass is taken);
//! * CDF curve - the pooled weighted empirical CDF per group on a grid.
//!
//! All solvers run the same weighted accumulation whether or not weights
//! are supplied (absent weights mean `u = 1`, draw weights `1/M`), so
//! degenerate-weight bootstrap replicates reproduce the DI solution
//! bit-for-bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Group, TrialDataset};
use crate::imputation::{ImputationSet, SubjectDraws};
use crate::inference::ImportanceWeights;

#[derive(Debug, Error)]
pub enum EstimandError {
    #[error("invalid estimand: {0}")]
    Invalid(String),
    #[error("{0} group is empty (or has zero total weight)")]
    EmptyGroup(Group),
    #[error("ANCOVA design is rank deficient")]
    DegenerateDesign,
    #[error("ANCOVA needs more subjects than coefficients for a residual variance")]
    TooFewSubjects,
    #[error("estimated endpoint density is zero at the {0} group quantile; variance is unstable")]
    UnstableQuantileVariance(Group),
    #[error("{0} is not supported for this operation")]
    Unsupported(&'static str),
    #[error("weights length {got} does not match {expected} subjects")]
    WeightLength { expected: usize, got: usize },
}

/// Estimand family; scalar variants target visit T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimandSpec {
    AteSimple,
    AteAncova,
    RiskDiff { threshold: f64 },
    Qte { q: f64 },
    CdfCurve { grid: Vec<f64> },
}

impl EstimandSpec {
    pub fn validate(&self) -> Result<(), EstimandError> {
        match self {
            EstimandSpec::AteSimple | EstimandSpec::AteAncova => Ok(()),
            EstimandSpec::RiskDiff { threshold } => {
                if threshold.is_finite() {
                    Ok(())
                } else {
                    Err(EstimandError::Invalid("risk threshold must be finite".into()))
                }
            }
            EstimandSpec::Qte { q } => {
                if *q > 0.0 && *q < 1.0 {
                    Ok(())
                } else {
                    Err(EstimandError::Invalid(format!(
                        "quantile level {q} outside (0, 1)"
                    )))
                }
            }
            EstimandSpec::CdfCurve { grid } => {
                if grid.is_empty() {
                    return Err(EstimandError::Invalid("empty CDF grid".into()));
                }
                if grid.windows(2).all(|w| w[0] < w[1]) && grid.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    Err(EstimandError::Invalid(
                        "CDF grid must be strictly increasing and finite".into(),
                    ))
                }
            }
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, EstimandSpec::CdfCurve { .. })
    }
}

/// How a point estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    /// One pooled solve over all draws.
    Di,
    /// A complete-data solve on a single imputed dataset.
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EstimateValue {
    Scalar(f64),
    Curve(Vec<f64>),
}

impl EstimateValue {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            EstimateValue::Scalar(x) => Some(*x),
            EstimateValue::Curve(_) => None,
        }
    }

    pub fn as_curve(&self) -> Option<&[f64]> {
        match self {
            EstimateValue::Scalar(_) => None,
            EstimateValue::Curve(v) => Some(v),
        }
    }
}

/// Point estimate with per-group components; `tau = tau_2 - tau_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub tau_1: EstimateValue,
    pub tau_2: EstimateValue,
    pub tau: EstimateValue,
    pub method: SolveMethod,
}

impl PointEstimate {
    pub fn scalar(&self) -> Option<f64> {
        self.tau.as_scalar()
    }

    fn from_groups(tau: [GroupValue; 2], method: SolveMethod) -> Self {
        match tau {
            [GroupValue::Scalar(a), GroupValue::Scalar(b)] => PointEstimate {
                tau_1: EstimateValue::Scalar(a),
                tau_2: EstimateValue::Scalar(b),
                tau: EstimateValue::Scalar(b - a),
                method,
            },
            [GroupValue::Curve(a), GroupValue::Curve(b)] => {
                let diff = a.iter().zip(&b).map(|(x, y)| y - x).collect();
                PointEstimate {
                    tau_1: EstimateValue::Curve(a),
                    tau_2: EstimateValue::Curve(b),
                    tau: EstimateValue::Curve(diff),
                    method,
                }
            }
            _ => unreachable!("mixed group value kinds"),
        }
    }
}

enum GroupValue {
    Scalar(f64),
    Curve(Vec<f64>),
}

/// Endpoint view of an imputation set: per subject either the observed
/// visit-T value or the endpoint coordinate of every draw, plus per-group
/// value-sorted orderings (computed once, reused by every weighted solve).
pub struct EndpointTable {
    entries: Vec<Endpoint>,
    sorted: [Vec<SortedEntry>; 2],
    m: usize,
}

#[derive(Debug, Clone)]
pub enum Endpoint {
    Observed(f64),
    Imputed(Vec<f64>),
}

#[derive(Debug, Clone, Copy)]
struct SortedEntry {
    value: f64,
    subject: u32,
    /// Draw index, or `u32::MAX` for an observed endpoint.
    draw: u32,
}

const OBSERVED: u32 = u32::MAX;

impl EndpointTable {
    pub fn new(set: &ImputationSet, ds: &TrialDataset) -> Self {
        let entries: Vec<Endpoint> = ds
            .subjects()
            .iter()
            .zip(&set.subjects)
            .map(|(s, d)| match d {
                SubjectDraws::Complete => Endpoint::Observed(*s.outcomes.last().unwrap()),
                SubjectDraws::Imputed { draws, .. } => {
                    let last = draws.nrows() - 1;
                    Endpoint::Imputed((0..draws.ncols()).map(|m| draws[(last, m)]).collect())
                }
            })
            .collect();
        Self::index(entries, ds, set.m)
    }

    /// A table over one completed endpoint vector (every entry observed).
    pub fn from_complete(ds: &TrialDataset, endpoints: &[f64]) -> Self {
        assert_eq!(endpoints.len(), ds.n_subjects());
        let entries = endpoints.iter().map(|&y| Endpoint::Observed(y)).collect();
        Self::index(entries, ds, 1)
    }

    fn index(entries: Vec<Endpoint>, ds: &TrialDataset, m: usize) -> Self {
        let mut sorted = [Vec::new(), Vec::new()];
        for (i, e) in entries.iter().enumerate() {
            let g = ds.subject(i).group.index();
            match e {
                Endpoint::Observed(y) => sorted[g].push(SortedEntry {
                    value: *y,
                    subject: i as u32,
                    draw: OBSERVED,
                }),
                Endpoint::Imputed(vals) => {
                    for (mi, &v) in vals.iter().enumerate() {
                        sorted[g].push(SortedEntry {
                            value: v,
                            subject: i as u32,
                            draw: mi as u32,
                        });
                    }
                }
            }
        }
        for s in &mut sorted {
            s.sort_by(|a, b| a.value.total_cmp(&b.value));
        }
        Self { entries, sorted, m }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &[Endpoint] {
        &self.entries
    }

    /// Pooled endpoint per subject under the given draw weights:
    /// `R y + (1 - R) sum_m w_m y*_m`.
    fn pooled_endpoint(&self, i: usize, iw: Option<&ImportanceWeights>) -> f64 {
        match &self.entries[i] {
            Endpoint::Observed(y) => *y,
            Endpoint::Imputed(vals) => {
                let inv_m = 1.0 / self.m as f64;
                match iw.and_then(|w| w.subject_weights(i)) {
                    Some(w) => vals.iter().zip(w).map(|(v, wm)| wm * v).sum(),
                    None => vals.iter().map(|v| inv_m * v).sum(),
                }
            }
        }
    }

    /// Pooled tail indicator per subject: `R 1{y >= c} + (1-R) sum_m w_m
    /// 1{y*_m >= c}`.
    fn pooled_tail(&self, i: usize, c: f64, iw: Option<&ImportanceWeights>) -> f64 {
        match &self.entries[i] {
            Endpoint::Observed(y) => {
                if *y >= c {
                    1.0
                } else {
                    0.0
                }
            }
            Endpoint::Imputed(vals) => {
                let inv_m = 1.0 / self.m as f64;
                match iw.and_then(|w| w.subject_weights(i)) {
                    Some(w) => vals
                        .iter()
                        .zip(w)
                        .map(|(v, wm)| if *v >= c { *wm } else { 0.0 })
                        .sum(),
                    None => vals
                        .iter()
                        .map(|v| if *v >= c { inv_m } else { 0.0 })
                        .sum(),
                }
            }
        }
    }

    fn entry_weight(
        &self,
        e: &SortedEntry,
        u: Option<&[f64]>,
        iw: Option<&ImportanceWeights>,
    ) -> f64 {
        let ui = u.map_or(1.0, |u| u[e.subject as usize]);
        if e.draw == OBSERVED {
            ui
        } else {
            let wm = match iw.and_then(|w| w.subject_weights(e.subject as usize)) {
                Some(w) => w[e.draw as usize],
                None => 1.0 / self.m as f64,
            };
            ui * wm
        }
    }
}

/// DI point estimate: one pooled solve of the estimating equations over all
/// draws with weight 1/M each.
pub fn solve_di(
    set: &ImputationSet,
    ds: &TrialDataset,
    spec: &EstimandSpec,
) -> Result<PointEstimate, EstimandError> {
    let table = EndpointTable::new(set, ds);
    solve_with_table(&table, ds, spec, None, None)
}

/// Complete-data solve on one imputed (or fully observed) endpoint vector;
/// identical to `solve_di` with M = 1.
pub fn solve_complete(
    ds: &TrialDataset,
    endpoints: &[f64],
    spec: &EstimandSpec,
) -> Result<PointEstimate, EstimandError> {
    if endpoints.len() != ds.n_subjects() {
        return Err(EstimandError::WeightLength {
            expected: ds.n_subjects(),
            got: endpoints.len(),
        });
    }
    let table = EndpointTable::from_complete(ds, endpoints);
    let mut est = solve_with_table(&table, ds, spec, None, None)?;
    est.method = SolveMethod::PerDataset;
    Ok(est)
}

/// The weighted estimating-equation solve shared by DI (`u`, `iw` absent)
/// and the bootstrap replicates (subject weights `u`, importance weights
/// `iw`).
pub fn solve_with_table(
    table: &EndpointTable,
    ds: &TrialDataset,
    spec: &EstimandSpec,
    u: Option<&[f64]>,
    iw: Option<&ImportanceWeights>,
) -> Result<PointEstimate, EstimandError> {
    spec.validate()?;
    if let Some(u) = u {
        if u.len() != ds.n_subjects() {
            return Err(EstimandError::WeightLength {
                expected: ds.n_subjects(),
                got: u.len(),
            });
        }
    }
    let subject_weight = |i: usize| u.map_or(1.0, |u| u[i]);
    match spec {
        EstimandSpec::AteSimple => {
            let mut num = [0.0; 2];
            let mut den = [0.0; 2];
            for i in 0..ds.n_subjects() {
                let g = ds.subject(i).group.index();
                let w = subject_weight(i);
                num[g] += w * table.pooled_endpoint(i, iw);
                den[g] += w;
            }
            group_ratio(num, den, SolveMethod::Di)
        }
        EstimandSpec::RiskDiff { threshold } => {
            let mut num = [0.0; 2];
            let mut den = [0.0; 2];
            for i in 0..ds.n_subjects() {
                let g = ds.subject(i).group.index();
                let w = subject_weight(i);
                num[g] += w * table.pooled_tail(i, *threshold, iw);
                den[g] += w;
            }
            group_ratio(num, den, SolveMethod::Di)
        }
        EstimandSpec::AteAncova => {
            let (gamma, xbar) = ancova_solve(table, ds, u, iw)?;
            let d = ds.n_covariates() + 1;
            let tau1 = xbar.dot(&gamma.rows(0, d).into_owned());
            let tau2 = tau1 + xbar.dot(&gamma.rows(d, d).into_owned());
            Ok(PointEstimate::from_groups(
                [GroupValue::Scalar(tau1), GroupValue::Scalar(tau2)],
                SolveMethod::Di,
            ))
        }
        EstimandSpec::Qte { q } => {
            let mut taus = [0.0; 2];
            for (g, tau) in taus.iter_mut().enumerate() {
                *tau = weighted_quantile(table, g, *q, u, iw)
                    .ok_or(EstimandError::EmptyGroup(Group::ALL[g]))?;
            }
            Ok(PointEstimate::from_groups(
                [GroupValue::Scalar(taus[0]), GroupValue::Scalar(taus[1])],
                SolveMethod::Di,
            ))
        }
        EstimandSpec::CdfCurve { grid } => {
            let mut curves: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for (g, curve) in curves.iter_mut().enumerate() {
                *curve = weighted_cdf(table, g, grid, u, iw)
                    .ok_or(EstimandError::EmptyGroup(Group::ALL[g]))?;
            }
            let [c1, c2] = curves;
            Ok(PointEstimate::from_groups(
                [GroupValue::Curve(c1), GroupValue::Curve(c2)],
                SolveMethod::Di,
            ))
        }
    }
}

fn group_ratio(
    num: [f64; 2],
    den: [f64; 2],
    method: SolveMethod,
) -> Result<PointEstimate, EstimandError> {
    for (g, d) in den.iter().enumerate() {
        if *d <= 0.0 {
            return Err(EstimandError::EmptyGroup(Group::ALL[g]));
        }
    }
    Ok(PointEstimate::from_groups(
        [
            GroupValue::Scalar(num[0] / den[0]),
            GroupValue::Scalar(num[1] / den[1]),
        ],
        method,
    ))
}

/// Weighted least-squares solve of the stacked ANCOVA moment conditions.
/// Returns the coefficient vector and the (weighted) overall mean of the
/// intercept-extended covariates.
fn ancova_solve(
    table: &EndpointTable,
    ds: &TrialDataset,
    u: Option<&[f64]>,
    iw: Option<&ImportanceWeights>,
) -> Result<(DVector<f64>, DVector<f64>), EstimandError> {
    let d = ds.n_covariates() + 1;
    let q = 2 * d;
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut moment = DVector::<f64>::zeros(q);
    let mut xbar = DVector::<f64>::zeros(d);
    let mut total = 0.0;
    let mut v = DVector::<f64>::zeros(q);
    for (i, s) in ds.subjects().iter().enumerate() {
        let w = u.map_or(1.0, |u| u[i]);
        let treated = s.group == Group::Treatment;
        v[0] = 1.0;
        for j in 0..d - 1 {
            v[1 + j] = s.covariates[j];
        }
        for j in 0..d {
            v[d + j] = if treated { v[j] } else { 0.0 };
        }
        let e = table.pooled_endpoint(i, iw);
        for a in 0..q {
            let wa = w * v[a];
            moment[a] += wa * e;
            for b in a..q {
                gram[(a, b)] += wa * v[b];
            }
        }
        for j in 0..d {
            xbar[j] += w * v[j];
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(EstimandError::EmptyGroup(Group::Control));
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let chol = gram.cholesky().ok_or(EstimandError::DegenerateDesign)?;
    let gamma = chol.solve(&moment);
    Ok((gamma, xbar / total))
}

/// Left-continuous generalized inverse of the pooled weighted CDF: the
/// smallest pooled value whose cumulative weight reaches `q * total`.
fn weighted_quantile(
    table: &EndpointTable,
    g: usize,
    q: f64,
    u: Option<&[f64]>,
    iw: Option<&ImportanceWeights>,
) -> Option<f64> {
    let entries = &table.sorted[g];
    let total: f64 = entries.iter().map(|e| table.entry_weight(e, u, iw)).sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let target = q * total;
    let mut cum = 0.0;
    let mut idx = 0;
    while idx < entries.len() {
        // Consume the whole tie group before testing.
        let value = entries[idx].value;
        while idx < entries.len() && entries[idx].value == value {
            cum += table.entry_weight(&entries[idx], u, iw);
            idx += 1;
        }
        if cum >= target {
            return Some(value);
        }
    }
    Some(entries.last()?.value)
}

/// Pooled weighted empirical CDF evaluated on an increasing grid.
fn weighted_cdf(
    table: &EndpointTable,
    g: usize,
    grid: &[f64],
    u: Option<&[f64]>,
    iw: Option<&ImportanceWeights>,
) -> Option<Vec<f64>> {
    let entries = &table.sorted[g];
    let total: f64 = entries.iter().map(|e| table.entry_weight(e, u, iw)).sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut cum = 0.0;
    let mut idx = 0;
    for &t in grid {
        while idx < entries.len() && entries[idx].value <= t {
            cum += table.entry_weight(&entries[idx], u, iw);
            idx += 1;
        }
        out.push((cum / total).clamp(0.0, 1.0));
    }
    Some(out)
}

/// Within-imputation (complete-data) variance of the scalar estimators,
/// used by Rubin's rule.
pub fn complete_data_variance(
    ds: &TrialDataset,
    endpoints: &[f64],
    spec: &EstimandSpec,
) -> Result<f64, EstimandError> {
    spec.validate()?;
    if endpoints.len() != ds.n_subjects() {
        return Err(EstimandError::WeightLength {
            expected: ds.n_subjects(),
            got: endpoints.len(),
        });
    }
    let by_group = |g: Group| -> Vec<f64> {
        ds.subjects()
            .iter()
            .zip(endpoints)
            .filter(|(s, _)| s.group == g)
            .map(|(_, &y)| y)
            .collect()
    };
    match spec {
        EstimandSpec::AteSimple => {
            let mut var = 0.0;
            for g in Group::ALL {
                let ys = by_group(g);
                if ys.len() < 2 {
                    return Err(EstimandError::EmptyGroup(g));
                }
                let n = ys.len() as f64;
                let mean = ys.iter().sum::<f64>() / n;
                let s2 = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
                var += s2 / n;
            }
            Ok(var)
        }
        EstimandSpec::RiskDiff { threshold } => {
            let mut var = 0.0;
            for g in Group::ALL {
                let ys = by_group(g);
                if ys.is_empty() {
                    return Err(EstimandError::EmptyGroup(g));
                }
                let n = ys.len() as f64;
                let p = ys.iter().filter(|&&y| y >= *threshold).count() as f64 / n;
                var += p * (1.0 - p) / n;
            }
            Ok(var)
        }
        EstimandSpec::AteAncova => {
            // M-estimation (sandwich) variance of the stacked moment
            // conditions. The contrast tau = xbar' gamma_int involves the
            // empirical covariate mean, so the influence of subject i is
            // the regression residual channel plus the covariate-mean
            // channel:
            //   phi_i = (x~_i' gamma_int - tau) + c' S_n^{-1} V_i e_i,
            // with c = (0, xbar), S_n the average design Gram, and e_i the
            // least-squares residual. The plain model-based contrast
            // variance omits the first channel and understates the MI
            // within-imputation variance.
            let table = EndpointTable::from_complete(ds, endpoints);
            let (gamma, xbar) = ancova_solve(&table, ds, None, None)?;
            let d = ds.n_covariates() + 1;
            let q = 2 * d;
            let n = ds.n_subjects();
            if n <= q {
                return Err(EstimandError::TooFewSubjects);
            }
            let gamma_int = gamma.rows(d, d).into_owned();
            let tau = xbar.dot(&gamma_int);
            let mut gram = DMatrix::<f64>::zeros(q, q);
            let mut v = DVector::<f64>::zeros(q);
            let fill_design = |s: &crate::data::Subject, v: &mut DVector<f64>| {
                let treated = s.group == Group::Treatment;
                v[0] = 1.0;
                for j in 0..d - 1 {
                    v[1 + j] = s.covariates[j];
                }
                for j in 0..d {
                    v[d + j] = if treated { v[j] } else { 0.0 };
                }
            };
            for s in ds.subjects() {
                fill_design(s, &mut v);
                for a in 0..q {
                    for b in a..q {
                        gram[(a, b)] += v[a] * v[b];
                    }
                }
            }
            for a in 0..q {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            let chol = gram.cholesky().ok_or(EstimandError::DegenerateDesign)?;
            let mut c = DVector::<f64>::zeros(q);
            for j in 0..d {
                c[d + j] = xbar[j];
            }
            // n * G^{-1} c so the residual channel carries S_n^{-1}.
            let weight_vec = chol.solve(&c) * n as f64;
            let mut sum_sq = 0.0;
            for (i, s) in ds.subjects().iter().enumerate() {
                fill_design(s, &mut v);
                let resid = endpoints[i] - v.dot(&gamma);
                let mean_channel = v.rows(0, d).dot(&gamma_int) - tau;
                let resid_channel = weight_vec.dot(&v) * resid;
                let phi = mean_channel + resid_channel;
                sum_sq += phi * phi;
            }
            Ok(sum_sq / (n * n) as f64)
        }
        EstimandSpec::Qte { q } => {
            let mut var = 0.0;
            for g in Group::ALL {
                let mut ys = by_group(g);
                if ys.len() < 2 {
                    return Err(EstimandError::EmptyGroup(g));
                }
                ys.sort_by(f64::total_cmp);
                let tau = sorted_quantile(&ys, *q);
                let f = kde_at(&ys, tau).ok_or(EstimandError::UnstableQuantileVariance(g))?;
                if f <= 0.0 || !f.is_finite() {
                    return Err(EstimandError::UnstableQuantileVariance(g));
                }
                let n = ys.len() as f64;
                var += q * (1.0 - q) / (n * f * f);
            }
            Ok(var)
        }
        EstimandSpec::CdfCurve { .. } => Err(EstimandError::Unsupported(
            "complete-data variance of a CDF curve",
        )),
    }
}

/// Left-continuous quantile of an already-sorted sample.
pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let target = q * n as f64;
    let mut cum = 0.0;
    for &v in sorted {
        cum += 1.0;
        if cum >= target {
            return v;
        }
    }
    sorted[n - 1]
}

/// Gaussian-kernel density estimate with Silverman's bandwidth at point `t`.
/// `None` when the sample is degenerate (zero spread).
fn kde_at(sorted: &[f64], t: f64) -> Option<f64> {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
    let mut scale = sd.min(iqr / 1.34);
    if scale <= 0.0 || !scale.is_finite() {
        scale = sd;
    }
    if scale <= 0.0 || !scale.is_finite() {
        return None;
    }
    let h = 0.9 * scale * n.powf(-0.2);
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let mut f = 0.0;
    for &y in sorted {
        let z = (t - y) / h;
        f += (-0.5 * z * z).exp();
    }
    Some(f * norm / n)
}
