//! Interval estimation: Rubin's combining rule for MI and the
//! importance-weighted bootstrap for DI.
//!
//! The weighted bootstrap never re-imputes. Each replicate draws i.i.d.
//! subject weights with mean and variance one, refits the model by weighted
//! pseudo-ML, reweights the existing draws by the conditional-density ratio
//! of the refitted to the original imputation law (normalized per subject),
//! re-solves the weighted estimating equations, and takes the spread of the
//! replicate estimates around the DI estimate as the variance. Importance
//! weights are computed in log space with a per-subject max subtraction
//! before exponentiation, since Gaussian log-densities under perturbed
//! parameters can differ by tens of nats.
//!
//! Intervals are 95% Wald with two-sided normal p-values throughout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrialDataset;
use crate::estimands::{solve_with_table, EndpointTable, EstimandError, EstimandSpec};
use crate::imputation::{ImputationSet, SubjectDraws};
use crate::mmrm::{FitWorkspace, MmrmFit};
use crate::rng::{exp1, poisson1, substream, StreamDomain};
use crate::sensitivity::{LawEngine, SensitivityError, SensitivityModel};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least {needed} {what}, got {got}")]
    NotEnough {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("estimates and within-imputation variances have different lengths")]
    LengthMismatch,
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("non-finite importance log-weight for subject {subject}")]
    NonFiniteWeight { subject: usize },
    #[error("{dropped} of {total} bootstrap replicates failed refitting (cap {cap}); first failure: {first}")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        cap: usize,
        first: String,
    },
    #[error("{0} is not supported here")]
    Unsupported(&'static str),
    #[error(transparent)]
    Estimand(#[from] EstimandError),
    #[error(transparent)]
    Law(#[from] SensitivityError),
}

/// Bootstrap weight distribution; both named schemes have mean 1 and
/// variance 1 as the theory requires. `Degenerate` (constant 1) exists for
/// diagnostics and tests only: it makes every replicate reproduce the DI
/// estimate exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Exp1,
    Poisson1,
    Degenerate,
}

impl WeightScheme {
    pub fn draw<R: rand_core::RngCore>(self, rng: &mut R) -> f64 {
        match self {
            WeightScheme::Exp1 => exp1(rng),
            WeightScheme::Poisson1 => poisson1(rng),
            WeightScheme::Degenerate => 1.0,
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp1" => Ok(WeightScheme::Exp1),
            "poisson1" => Ok(WeightScheme::Poisson1),
            other => Err(format!("unknown weight scheme '{other}' (expected exp1|poisson1)")),
        }
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::Exp1 => write!(f, "exp1"),
            WeightScheme::Poisson1 => write!(f, "poisson1"),
            WeightScheme::Degenerate => write!(f, "degenerate"),
        }
    }
}

/// Weighted-bootstrap configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub weight_scheme: WeightScheme,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            weight_scheme: WeightScheme::Exp1,
            seed: 0,
        }
    }
}

/// Per-subject importance weights over the M draws; each incomplete
/// subject's weights sum to one. Complete subjects carry the uniform vector
/// by convention and are stored implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    per_subject: Vec<Option<Vec<f64>>>,
    m: usize,
}

impl ImportanceWeights {
    /// Uniform weights (every subject treated as if the refit equals the
    /// original fit).
    pub fn uniform(n_subjects: usize, m: usize) -> Self {
        Self {
            per_subject: vec![None; n_subjects],
            m,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Explicit weights for an incomplete subject, `None` for complete
    /// subjects (uniform by convention).
    pub fn subject_weights(&self, i: usize) -> Option<&[f64]> {
        self.per_subject[i].as_deref()
    }

    /// Weight of draw m for subject i, with the uniform fallback.
    pub fn weight(&self, i: usize, m: usize) -> f64 {
        match &self.per_subject[i] {
            Some(w) => w[m],
            None => 1.0 / self.m as f64,
        }
    }

    /// Smallest effective sample size `1 / sum_m w^2` across subjects with
    /// explicit weights; `None` when every subject is uniform.
    pub fn min_ess(&self) -> Option<f64> {
        self.per_subject
            .iter()
            .flatten()
            .map(|w| 1.0 / w.iter().map(|x| x * x).sum::<f64>())
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMethod {
    MiRubin,
    DiWeightedBootstrap,
    Wald,
}

/// Replicate / weight diagnostics attached to an inference result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub n_replicates: usize,
    pub n_dropped: usize,
    /// Smallest per-subject importance-weight ESS over all replicates.
    pub min_ess: Option<f64>,
    /// Mean over replicates of the per-replicate minimum ESS.
    pub mean_min_ess: Option<f64>,
}

/// Point estimate with variance, 95% Wald interval, and two-sided normal
/// p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub tau_hat: f64,
    pub variance: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub p_value: f64,
    pub method: InferenceMethod,
    pub diagnostics: Diagnostics,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// 95% Wald interval and two-sided normal p-value from a point estimate and
/// its variance.
pub fn wald_summary(
    tau_hat: f64,
    variance: f64,
    method: InferenceMethod,
) -> Result<InferenceOutput, InferenceError> {
    if variance < 0.0 || !variance.is_finite() {
        return Err(InferenceError::NegativeVariance(variance));
    }
    let se = variance.sqrt();
    let p_value = if se == 0.0 {
        if tau_hat == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        libm::erfc((tau_hat / se).abs() / std::f64::consts::SQRT_2)
    };
    Ok(InferenceOutput {
        tau_hat,
        variance,
        se,
        ci: (tau_hat - 1.96 * se, tau_hat + 1.96 * se),
        p_value,
        method,
        diagnostics: Diagnostics::default(),
    })
}

/// Rubin's combining rule: the MI point estimate is the mean of the
/// per-dataset estimates, and the variance is the mean within-imputation
/// variance plus `(1 + 1/M)` times the between-imputation variance.
pub fn rubin_combine(
    estimates: &[f64],
    within_vars: &[f64],
) -> Result<InferenceOutput, InferenceError> {
    let m = estimates.len();
    if m < 2 {
        return Err(InferenceError::NotEnough {
            what: "imputed datasets",
            needed: 2,
            got: m,
        });
    }
    if within_vars.len() != m {
        return Err(InferenceError::LengthMismatch);
    }
    if let Some(&bad) = within_vars.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(InferenceError::NegativeVariance(bad));
    }
    let mf = m as f64;
    let point = estimates.iter().sum::<f64>() / mf;
    let within = within_vars.iter().sum::<f64>() / mf;
    let between = estimates
        .iter()
        .map(|e| (e - point) * (e - point))
        .sum::<f64>()
        / (mf - 1.0);
    let variance = within + (1.0 + 1.0 / mf) * between;
    let mut out = wald_summary(point, variance, InferenceMethod::MiRubin)?;
    out.diagnostics.n_replicates = m;
    Ok(out)
}

/// Normalized importance weights of the existing draws under a refitted
/// parameter: `w_m proportional to f(draw_m | observed, theta_b) /
/// f(draw_m | observed, theta_hat)`, summing to one per subject.
pub fn importance_reweight(
    set: &ImputationSet,
    ds: &TrialDataset,
    fit_hat: &MmrmFit,
    fit_b: &MmrmFit,
    model: SensitivityModel,
) -> Result<ImportanceWeights, InferenceError> {
    let engine_hat = LawEngine::new(fit_hat, model)?;
    let engine_b = LawEngine::new(fit_b, model)?;
    let denom = log_density_table(set, ds, &engine_hat)?;
    reweight_against(set, ds, &engine_b, &denom)
}

/// Per-subject log-densities of every draw under `engine`'s laws; `None`
/// entries are complete subjects.
fn log_density_table(
    set: &ImputationSet,
    ds: &TrialDataset,
    engine: &LawEngine,
) -> Result<Vec<Option<Vec<f64>>>, InferenceError> {
    let mut out = Vec::with_capacity(set.subjects.len());
    for (i, s) in set.subjects.iter().enumerate() {
        match s {
            SubjectDraws::Complete => out.push(None),
            SubjectDraws::Imputed { draws, .. } => {
                let mut buf = vec![0.0; draws.ncols()];
                engine.log_density_of_draws(ds, i, draws, &mut buf)?;
                out.push(Some(buf));
            }
        }
    }
    Ok(out)
}

/// Softmax over log-ratios; shift-invariant via max subtraction.
fn softmax_into(log_w: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in log_w.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in log_w.iter_mut() {
        *w /= total;
    }
}

fn reweight_against(
    set: &ImputationSet,
    ds: &TrialDataset,
    engine_b: &LawEngine,
    denom: &[Option<Vec<f64>>],
) -> Result<ImportanceWeights, InferenceError> {
    let mut per_subject = Vec::with_capacity(set.subjects.len());
    for (i, s) in set.subjects.iter().enumerate() {
        match s {
            SubjectDraws::Complete => per_subject.push(None),
            SubjectDraws::Imputed { draws, .. } => {
                let mut lw = vec![0.0; draws.ncols()];
                engine_b.log_density_of_draws(ds, i, draws, &mut lw)?;
                let d = denom[i].as_ref().expect("imputed subject has densities");
                for (w, dm) in lw.iter_mut().zip(d) {
                    *w -= dm;
                    if !w.is_finite() {
                        return Err(InferenceError::NonFiniteWeight { subject: i });
                    }
                }
                softmax_into(&mut lw);
                per_subject.push(Some(lw));
            }
        }
    }
    Ok(ImportanceWeights {
        per_subject,
        m: set.m,
    })
}

/// The importance-weighted bootstrap variance estimator for the DI
/// estimate. Draws are never regenerated; each replicate reuses the
/// imputation set through new subject and importance weights. Replicates
/// whose refit fails are dropped, up to a 10% cap.
pub fn weighted_bootstrap(
    set: &ImputationSet,
    ds: &TrialDataset,
    fit_hat: &MmrmFit,
    model: SensitivityModel,
    spec: &EstimandSpec,
    cfg: &BootstrapConfig,
) -> Result<InferenceOutput, InferenceError> {
    if !spec.is_scalar() {
        return Err(InferenceError::Unsupported("bootstrap inference on a curve estimand"));
    }
    if cfg.replicates < 2 {
        return Err(InferenceError::NotEnough {
            what: "bootstrap replicates",
            needed: 2,
            got: cfg.replicates,
        });
    }
    let table = EndpointTable::new(set, ds);
    let tau_di = solve_with_table(&table, ds, spec, None, None)?
        .scalar()
        .expect("scalar estimand");
    let workspace = FitWorkspace::new(ds);
    let engine_hat = LawEngine::new(fit_hat, model)?;
    let denom = log_density_table(set, ds, &engine_hat)?;
    let n = ds.n_subjects();

    let replicates: Vec<Result<(f64, Option<f64>), String>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(cfg.seed, StreamDomain::Bootstrap, b);
            let u: Vec<f64> = (0..n).map(|_| cfg.weight_scheme.draw(&mut rng)).collect();
            let fit_b = workspace.fit(Some(&u)).map_err(|e| e.to_string())?;
            let engine_b = LawEngine::new(&fit_b, model).map_err(|e| e.to_string())?;
            let iw = reweight_against(set, ds, &engine_b, &denom).map_err(|e| e.to_string())?;
            let est = solve_with_table(&table, ds, spec, Some(&u), Some(&iw))
                .map_err(|e| e.to_string())?;
            Ok((est.scalar().expect("scalar estimand"), iw.min_ess()))
        })
        .collect();

    let total = cfg.replicates;
    let cap = total / 10;
    let mut estimates = Vec::with_capacity(total);
    let mut min_ess: Option<f64> = None;
    let mut sum_min_ess = 0.0;
    let mut n_ess = 0usize;
    let mut first_failure = None;
    let mut dropped = 0;
    for r in replicates {
        match r {
            Ok((tau_b, ess)) => {
                estimates.push(tau_b);
                if let Some(e) = ess {
                    min_ess = Some(min_ess.map_or(e, |m: f64| m.min(e)));
                    sum_min_ess += e;
                    n_ess += 1;
                }
            }
            Err(e) => {
                dropped += 1;
                first_failure.get_or_insert(e);
            }
        }
    }
    if dropped > cap || estimates.len() < 2 {
        return Err(InferenceError::TooManyDropped {
            dropped,
            total,
            cap,
            first: first_failure.unwrap_or_else(|| "none".into()),
        });
    }
    let variance = estimates
        .iter()
        .map(|t| (t - tau_di) * (t - tau_di))
        .sum::<f64>()
        / (estimates.len() - 1) as f64;
    let mut out = wald_summary(tau_di, variance, InferenceMethod::DiWeightedBootstrap)?;
    out.diagnostics = Diagnostics {
        n_replicates: estimates.len(),
        n_dropped: dropped,
        min_ess,
        mean_min_ess: (n_ess > 0).then(|| sum_min_ess / n_ess as f64),
    };
    Ok(out)
}
