//! Stochastic completion: M draws per incomplete subject from its
//! conditional law, shared by the DI and MI analysis routes.
//!
//! Draws are generated on per-subject rng substreams keyed by
//! `(seed, subject index)`, so regeneration with the same
//! `(fit, model, M, seed)` is bit-identical regardless of how the work is
//! scheduled across threads. Draws are stored dense; at desk scale
//! (n <= 1e4, M <= 1e3, T <= 10) this is cheap.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::TrialDataset;
use crate::mmrm::MmrmFit;
use crate::rng::{substream, StreamDomain};
use crate::sensitivity::{LawEngine, SensitivityError, SensitivityModel};

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("imputation size must be at least 1")]
    ZeroImputations,
    #[error("imputation index {index} out of range for M = {m}")]
    IndexOutOfRange { index: usize, m: usize },
    #[error(transparent)]
    Law(#[from] SensitivityError),
}

/// Draw storage for one subject.
#[derive(Debug, Clone, PartialEq)]
pub enum SubjectDraws {
    /// Complete subjects carry no draws.
    Complete,
    Imputed {
        /// 1-based visit indices covered by the draws.
        visits: Vec<usize>,
        /// `d x M`; column m is the m-th completion of the missing block.
        draws: DMatrix<f64>,
    },
}

/// M stochastic completions of every incomplete subject, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSet {
    pub m: usize,
    pub model: SensitivityModel,
    pub seed: u64,
    /// Fingerprint of the fit the draws were generated under.
    pub theta_fingerprint: u64,
    pub subjects: Vec<SubjectDraws>,
}

impl ImputationSet {
    pub fn subject(&self, i: usize) -> &SubjectDraws {
        &self.subjects[i]
    }

    pub fn n_incomplete(&self) -> usize {
        self.subjects
            .iter()
            .filter(|s| matches!(s, SubjectDraws::Imputed { .. }))
            .count()
    }

    /// FNV-1a hash over provenance and all draw bits; two sets produced by
    /// the same `(fit, model, M, seed)` hash identically.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat_u64 = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat_u64(self.m as u64);
        eat_u64(self.seed);
        eat_u64(self.theta_fingerprint);
        for s in &self.subjects {
            match s {
                SubjectDraws::Complete => eat_u64(0),
                SubjectDraws::Imputed { visits, draws } => {
                    eat_u64(visits.len() as u64);
                    for &v in visits {
                        eat_u64(v as u64);
                    }
                    for x in draws.iter() {
                        eat_u64(x.to_bits());
                    }
                }
            }
        }
        h
    }
}

/// Draws M completions per incomplete subject from its law under `model`.
/// Complete subjects are untouched.
pub fn impute(
    fit: &MmrmFit,
    ds: &TrialDataset,
    model: SensitivityModel,
    m: usize,
    seed: u64,
) -> Result<ImputationSet, ImputeError> {
    if m == 0 {
        return Err(ImputeError::ZeroImputations);
    }
    let engine = LawEngine::new(fit, model)?;
    let subjects: Vec<Result<SubjectDraws, ImputeError>> = (0..ds.n_subjects())
        .into_par_iter()
        .map(|i| {
            if ds.pattern_of(i).is_complete {
                return Ok(SubjectDraws::Complete);
            }
            let law = engine.law_for(ds, i)?;
            let mut rng = substream(seed, StreamDomain::Imputation, i as u64);
            let draws = law.law.sample_matrix(&mut rng, m);
            Ok(SubjectDraws::Imputed {
                visits: law.visits,
                draws,
            })
        })
        .collect();
    let subjects = subjects.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ImputationSet {
        m,
        model,
        seed,
        theta_fingerprint: fit.fingerprint(),
        subjects,
    })
}

/// The m-th completed endpoint (visit T) per subject: the observed value
/// for complete subjects, otherwise the final coordinate of draw m.
pub fn completed_endpoint(
    set: &ImputationSet,
    ds: &TrialDataset,
    m_idx: usize,
) -> Result<Vec<f64>, ImputeError> {
    if m_idx >= set.m {
        return Err(ImputeError::IndexOutOfRange {
            index: m_idx,
            m: set.m,
        });
    }
    let mut out = Vec::with_capacity(ds.n_subjects());
    for (i, s) in ds.subjects().iter().enumerate() {
        match &set.subjects[i] {
            SubjectDraws::Complete => out.push(*s.outcomes.last().expect("baseline observed")),
            SubjectDraws::Imputed { draws, .. } => out.push(draws[(draws.nrows() - 1, m_idx)]),
        }
    }
    Ok(out)
}
