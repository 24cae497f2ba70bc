//! Configuration-driven runner for stoplab experiments.

pub mod config;
pub mod error;
pub mod run;
