//! Estimation of linear causal effects from *unpaired* two-sample data.
//!
//! The setting: covariates and outcomes are observed under shared experimental
//! conditions (instruments), but never jointly. One sample carries
//! `(instrument, outcome)` pairs, the other `(instrument, covariates)` pairs.
//! Under an exclusion restriction and a shared first stage, the causal
//! coefficient vector is identified from the two cross-covariances, and this
//! crate provides:
//!
//! * [`moments`] — centered cross-covariances, fold-wise covariances, the
//!   cross-fold and closed-form denominators, and the moment-variance estimate;
//! * [`estimators`] — TS-IV, TS-2SLS, naive OLS via random pairing, weighted
//!   GMM with optional ℓ1 penalty and post-selection refit, and the
//!   cross-moment GMM estimators for the many-instrument regime;
//! * [`inference`] — sandwich variances and Wald confidence intervals on the
//!   selected support;
//! * [`identifiability`] — finite rank / restricted-nullspace checkers, a
//!   brute-force sparsest-solution oracle, and the attenuation-bias predictor
//!   for the naive estimator;
//! * [`datagen`] — seeded synthetic generators (categorical one-hot and
//!   continuous instruments) with ground truth;
//! * [`harness`] — a reproducible experiment runner with CSV/JSON output and
//!   the `unpaired-iv` command line interface.
//!
//! Start with the runnable examples in `examples/` (one per capability), or
//! run `cargo run --bin unpaired-iv -- --help`.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod identifiability;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod moments;

pub use dataset::{InstrumentKind, Instruments, UnpairedDataset};
pub use error::{Error, Result};
pub use estimators::{Estimate, EstimatorConfig};
pub use moments::MomentSystem;
