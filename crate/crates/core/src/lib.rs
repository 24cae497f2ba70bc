//! Monte Carlo estimators of drift, variance rate and covariance rate as
//! stopping derivatives, with statistical checks of the stochastic calculus
//! identities they satisfy.

pub mod condest;
pub mod error;
pub mod paths;
pub mod processes;
pub mod stats;
pub mod stopderiv;
pub mod stopping;
pub mod theorems;

pub use error::{LabError, Result};
