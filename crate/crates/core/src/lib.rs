//! Verification laboratory for deterministic flow matching.
//!
//! Endpoints are Gaussian mixtures, so the expected velocity field of the
//! stochastic interpolant `X_t = alpha_t X_0 + beta_t X_1 + gamma_t Z` and its
//! spatial Jacobian are available in closed form. The crate integrates the
//! flow ODE for the exact field and for controlled perturbations of it,
//! measures Wasserstein errors, Lipschitz profiles and regularity constants,
//! and compares every measurement against the corresponding theoretical bound.
//!
//! | module | contents |
//! |--------|----------|
//! | [`schedules`] | coefficient schedules and their integrals |
//! | [`mixtures`] | Gaussian-mixture endpoints |
//! | [`regularity`] | noise-posterior covariances and λ estimation |
//! | [`velocity`] | exact and perturbed velocity fields, Jacobians, ε |
//! | [`flow`] | ODE and variational integration, Alekseev–Gröbner check |
//! | [`metrics`] | empirical W2, coupling bound, operator norms |
//! | [`bounds`] | right-hand sides of every bound |
//! | [`experiments`] | configs, suites, reports |

pub mod bounds;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod mixtures;
pub mod quadrature;
pub mod regularity;
pub mod rng;
pub mod schedules;
pub mod velocity;

pub use error::{Error, Result};
pub use mixtures::{Covariance, GaussianMixture, SupportRadius};
pub use schedules::{Coefficients, Profile, Schedule, ScheduleKind};
