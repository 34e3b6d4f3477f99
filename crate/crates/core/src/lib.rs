//! Detection of spatial clusters of atypical survival in unit-indexed,
//! right-censored time-to-event data.
//!
//! The two-stage method lives in [`frailty`] (shared-frailty estimation under a
//! Leroux CAR prior, with Bayes-factor model selection) and [`scan`] (a Gaussian
//! scan over the selected frailties), with Monte Carlo significance in
//! [`inference`]. [`baselines`] holds the exponential and log-rank scans that
//! assume independent individuals, and [`simulation`] drives the simulation
//! studies used to compare them.

pub mod baselines;
pub mod error;
pub mod frailty;
pub mod inference;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scan;
pub mod simulation;
pub mod spatial;
pub mod survdata;

pub use error::{Error, Result};
