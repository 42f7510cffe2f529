//! Mixture envelope multivariate regression for heterogeneous data with
//! unknown group labels.
//!
//! The model couples a finite Gaussian mixture over groups with a shared
//! envelope subspace: each group k has its own mean, coordinate matrix and
//! material covariance, while the basis and the immaterial covariance are
//! common. Fitting alternates a stochastic label imputation with blockwise
//! closed-form/manifold estimation ([`icc`]); the number of clusters and the
//! envelope dimension are selected by BIC ([`selection`]); [`evaluation`]
//! provides label-matched classification rates, cross-validated prediction
//! error and bootstrap coefficient SDs; [`baselines`] has the OLS-mixture
//! and two-stage clustering comparators; [`simgen`] generates benchmark
//! scenarios.

pub mod baselines;
pub mod envelope;
pub mod error;
pub mod evaluation;
pub mod icc;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod selection;
pub mod simgen;

pub use error::{Error, Result};
