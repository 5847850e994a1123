//! Distributional imputation (DI) and multiple imputation (MI) for
//! sensitivity analysis of longitudinal clinical trials with monotone
//! missing continuous outcomes.
//!
//! The pipeline is: ingest a wide-format trial dataset ([`data`]), fit a
//! group-specific MMRM by monotone sequential factorization ([`mmrm`]),
//! build per-subject Gaussian imputation laws under a sensitivity model
//! ([`sensitivity`]), draw M stochastic completions ([`imputation`]), solve
//! estimating equations for the treatment-effect estimand ([`estimands`]),
//! and produce interval estimates either by Rubin's rule (MI) or by the
//! importance-weighted bootstrap (DI) ([`inference`]). The [`sim`] module
//! regenerates the synthetic trial scenarios used to benchmark both
//! inference routes side by side.

pub mod data;
pub mod estimands;
pub mod gaussian;
pub mod imputation;
pub mod inference;
pub mod mmrm;
pub mod rng;
pub mod sensitivity;
pub mod sim;

pub use data::{DropoutPattern, Group, Subject, TrialDataset};
pub use estimands::{EstimandSpec, EstimateValue, PointEstimate};
pub use gaussian::GaussianLaw;
pub use imputation::ImputationSet;
pub use inference::{BootstrapConfig, InferenceOutput, WeightScheme};
pub use mmrm::MmrmFit;
pub use sensitivity::{ConditionalLaw, SensitivityModel};
pub use sim::{MetricsRow, SimScenario};
