//! Simulation engine and estimator suite for pre-symptomatic Alzheimer's
//! clinical trial designs.
//!
//! The crate simulates correlated multivariate cognitive trajectories from a
//! joint mixed-effects model, derives progression-to-MCI events with a random
//! forest classifier, imposes a three-cause missingness mechanism, and
//! compares continuous-outcome models (MMRM, cLDA) against time-to-progression
//! analysis (Cox PH) for power, Type I error, and missingness-induced bias.
//!
//! Module map:
//! - [`transforms`]: raw score <-> Z-scale conversion and the PACC composite
//! - [`datagen`]: subject covariates, random effects, and trajectory simulation
//! - [`diagnosis`]: random forest classifier, synthetic labeler, progression times
//! - [`dropout`]: missingness mechanism and counterfactual adjustment
//! - [`estimators`]: MMRM, cLDA, Cox PH, Kaplan-Meier fitters
//! - [`inference`]: estimand contrasts, Wald tests, Mehrotra mixture correction
//! - [`harness`]: Monte Carlo driver, labeler calibration, summary tables

pub mod datagen;
pub mod diagnosis;
pub mod dropout;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod inference;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
