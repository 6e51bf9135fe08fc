//! Semi-supervised U-statistics.
//!
//! This crate implements U-statistics that borrow strength from unlabeled
//! covariates: the classical estimator plus cross-fit, plug-in, single-split
//! and degeneracy-adaptive semi-supervised variants, together with jackknife
//! variance estimation, confidence intervals, semi-supervised Kendall and
//! Wilcoxon rank tests, and a seeded Monte Carlo harness for validating the
//! efficiency claims at desk scale.
//!
//! The building blocks are organized bottom-up:
//!
//! - [`data`]: dataset container, CSV ingestion, deterministic fold splits
//! - [`kernels`]: symmetric kernels of order `r` and first-projection estimators
//! - [`ustat`]: classical U-statistics and the jackknife variance
//! - [`regress`]: native regressors for the assistant function
//! - [`estimators`]: semi-supervised U-statistics and variance estimation
//! - [`adaptive`]: degeneracy-adaptive bivariate estimators
//! - [`rank_tests`]: classical and semi-supervised Kendall / Wilcoxon tests
//! - [`sim`]: data-generating models and the simulation harness

pub mod adaptive;
pub mod data;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod numerics;
pub mod rank_tests;
pub mod regress;
pub mod rng;
pub mod sim;
pub mod ustat;

pub use error::{Error, Result};
