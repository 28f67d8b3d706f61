//! Spatially coupled pooled-measurement designs, approximate message passing
//! recovery, and the matching asymptotic analysis tools.
//!
//! The crate covers two closely related inference problems on a common binary
//! test design: quantitative group testing, where a {0,1} signal is observed
//! through noisy item counts per test, and pooled categorical data, where each
//! item carries one of `L` labels and tests report noisy per-label counts.
//!
//! Modules:
//!
//! * [`design`] — band-diagonal base matrices and sampled test designs,
//!   together with their variance-rescaled form.
//! * [`model`] — signal and observation sampling, observation rescaling, and
//!   instance (de)serialization.
//! * [`denoise`] — Bayes posterior means (and derivatives) for Bernoulli and
//!   categorical priors under Gaussian effective noise.
//! * [`amp`] — the message passing recoveries: scalar, matrix and columnwise.
//! * [`state_evolution`] — the deterministic low-dimensional recursions that
//!   predict the algorithms' per-iteration behavior.
//! * [`potential`] — scalar potential functions, their minimizers and
//!   stationary points, and the small-noise scaling of the minimizer.
//! * [`metrics`] — error and overlap metrics shared by experiments.
//! * [`baselines`] — linear programming and convex relaxation baselines.

pub mod amp;
pub mod baselines;
pub mod denoise;
pub mod design;
pub mod metrics;
pub mod model;
pub mod potential;
pub mod quad;
mod rng;
pub mod state_evolution;
