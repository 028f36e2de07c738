//! Rerandomization of treatment assignments with quadratic-form balance
//! criteria `Q = vᵀ A v`, together with threshold calibration, variance
//! diagnostics, post-experiment inference and a simulation harness.

pub mod config;
pub mod covariate;
pub mod criterion;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod report;
pub mod rerandomizer;
pub mod rng;
pub mod simulation;
pub mod special;
pub mod threshold;

pub use covariate::{mean_difference, standardize, CovariateMatrix, DesignModel, MeanDifference, SigmaGeometry};
pub use criterion::{build_criterion, qform_value, BalanceCriterion, CriterionKind};
pub use diagnostics::{NuFactors, OutcomeModel};
pub use error::{Error, Result};
pub use rerandomizer::{batch_accepted, complete_randomization, rerandomize, Assignment, RerandomizationResult};
pub use threshold::{CalibrationMethod, Threshold};
