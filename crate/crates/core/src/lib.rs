//! Off-policy evaluation for contextual bandits with large action spaces.
//!
//! The crate implements the marginalized inverse propensity score (MIPS)
//! estimator together with the usual baselines (DM, IPS, DR and the shrunk
//! DR family), a synthetic environment generator with factorized categorical
//! action embeddings, learned nuisance models, SLOPE-style estimator
//! selection, and exact enumeration oracles for small tabular problems.
//!
//! Module map:
//!
//! - [`policy`]: distributions, policies, and importance weights.
//! - [`data`]: logged records and datasets, CSV import/export.
//! - [`synth`]: synthetic environments and logged data.
//! - [`estimators`]: value estimators.
//! - [`models`]: action posterior and reward regressors.
//! - [`slope`]: confidence widths and Lepski-style selection.
//! - [`oracle`]: exact bias/variance computations on tabular instances.
//! - [`harness`]: replications, sweeps, bootstrap CDFs, and reports.

pub mod data;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod slope;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
