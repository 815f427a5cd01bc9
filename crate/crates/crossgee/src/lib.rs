//! Penalized estimating equations for high-dimensional multivariate-response
//! regression with covariate-dependent covariance.
//!
//! The pipeline: fit the mean model by partially penalized estimating
//! equations under a working covariance ([`solver`]), screen which
//! covariates the conditional covariance actually depends on via
//! decorrelated score tests ([`screening`]), estimate the covariance
//! function by a matrix Nadaraya–Watson smoother on that active set
//! ([`kernel`]), refit with the estimated weights on the opposite data fold
//! ([`crossfit`]), and test linear hypotheses on the unpenalized
//! coordinates with sandwich-variance Wald statistics ([`inference`]).
//! [`sim`] generates synthetic scenarios and runs the Monte Carlo
//! experiments used to validate all of the above.
//!
//! Everything is generic over the floating scalar (see [`scalar::Scalar`]);
//! the aliases below fix `f64`, the intended default precision.

pub mod chi2;
pub mod crossfit;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod lasso;
pub mod model;
pub mod penalty;
pub mod scalar;
pub mod screening;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` aliases for the main user-facing types.
pub type ObservationBlock64 = model::ObservationBlock<f64>;
pub type Dataset64 = model::Dataset<f64>;
pub type LinkFunction64 = model::LinkFunction<f64>;
pub type PenaltyConfig64 = penalty::PenaltyConfig<f64>;
pub type ModelSpec64 = solver::ModelSpec<f64>;
pub type SolverConfig64 = solver::SolverConfig<f64>;
pub type WorkingCovariance64 = solver::WorkingCovariance<f64>;
pub type FitResult64 = solver::FitResult<f64>;
pub type CovarianceModel64 = kernel::CovarianceModel<f64>;
pub type ScreeningConfig64 = screening::ScreeningConfig<f64>;
pub type ScreeningResult64 = screening::ScreeningResult<f64>;
pub type CrossFitConfig64 = crossfit::CrossFitConfig<f64>;
pub type CrossFitResult64 = crossfit::CrossFitResult<f64>;
pub type HypothesisSpec64 = inference::HypothesisSpec<f64>;
pub type SandwichCovariance64 = inference::SandwichCovariance<f64>;
pub type WaldReport64 = inference::WaldReport<f64>;
pub type ScenarioConfig64 = sim::ScenarioConfig<f64>;
