//! Principal stratification analysis of randomized experiments with a binary
//! intermediate variable, based on principal scores.
//!
//! The crate is organized around a two-step workflow: first fit a model for
//! the latent principal strata from `(X, Z, S)` alone (no outcomes), then
//! estimate principal causal effects by weighting or covariate adjustment,
//! with bootstrap inference and sensitivity analysis for the identifying
//! assumptions.
//!
//! - [`dataset`]: experiment data loading, validation, and cell summaries.
//! - [`numkit`]: weighted logistic/multinomial regression and weighted least
//!   squares used by the score models and adjusted estimators.
//! - [`pscore`]: principal-score models under strong monotonicity,
//!   monotonicity (EM), and a fixed deviation `xi` from monotonicity (EM).
//! - [`estimators`]: stratum weights, weighting and covariate-adjusted
//!   estimators, bootstrap confidence intervals.
//! - [`diagnostics`]: covariate balance checks and the exclusion-restriction
//!   compatibility test.
//! - [`sensitivity`]: estimate surfaces over the sensitivity parameters
//!   `eps`, `(eps1, eps0)`, and `xi`.
//! - [`simkit`]: simulation presets, a repeated-sampling study harness, and
//!   the exact discrete-population identification oracle.

pub mod dataset;
pub mod diagnostics;
pub mod estimators;
pub mod numkit;
pub mod pscore;
pub mod sensitivity;
pub mod simkit;

/// How an error should be classified by front ends (exit codes, retries).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid input, configuration, or precondition.
    Validation,
    /// A numerical procedure failed beyond its fallbacks.
    Numerical,
}

/// Umbrella error for the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] dataset::DataError),
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Score(#[from] pscore::ScoreError),
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error(transparent)]
    Sim(#[from] simkit::SimError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(_) => ErrorClass::Validation,
            Error::Num(e) => e.class(),
            Error::Score(e) => e.class(),
            Error::Estimator(e) => e.class(),
            Error::Sim(e) => e.class(),
        }
    }
}

/// Splits one master seed into independent per-task seeds.
///
/// SplitMix64 finalizer; used so bootstrap replicates, grid points, and
/// simulation repetitions get reproducible, order-independent streams.
pub(crate) fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
