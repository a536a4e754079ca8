//! Average treatment effect estimation for clustered observational data via
//! calibration-weighted propensity scores, with a survey-sampling extension
//! and a Monte Carlo evaluation harness.

pub mod balance;
pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod glmm;
pub mod link;
pub mod logistic;
pub mod numeric;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
