//! Debiased, cross-fitted estimation of survival integrals and smooth survival
//! functionals from left-truncated, right-censored data.
//!
//! The crate is organised bottom-up: [`step`] and [`data`] hold the basic
//! containers, [`nuisance`] fits the nuisance tuple, [`influence`] evaluates the
//! efficient influence function and its remainder, [`estimators`] turns those
//! into point estimates, intervals and bands, [`functionals`] catalogues the
//! estimands, and [`simulation`] reproduces the Monte Carlo study.

pub mod data;
pub mod estimators;
pub mod functionals;
pub mod influence;
pub mod nuisance;
pub mod simulation;
pub mod step;

pub use data::{Dataset, FoldPlan, ObservedRecord, Stratum};
pub use functionals::kernel::Kernel;
pub use nuisance::{NuisanceConfig, NuisanceSet};
pub use step::StepFunction;
