//! Toolkit for affine square-root diffusions
//!
//! ```text
//!     dX_t = (a X_t + b) dt + Sigma sqrt(|v(X_t)|) dW_t,      v_i(x) = alpha_i + beta_i . x
//! ```
//!
//! where `sqrt(|v(x)|)` is the diagonal matrix with entries `sqrt(|v_i(x)|)`.
//! The crate answers a family of questions about these processes:
//!
//! * [`model`] — parse, validate and classify a model (canonical form,
//!   proportional volatility factors, boundary non-negativity conditions).
//! * [`canonical`] — affine change of coordinates bringing a model with
//!   proportional volatility factors to the canonical form `v_i(x) = x_1`.
//! * [`feller`] — structural drift/intercept conditions that keep volatility
//!   factors non-negative, reported with signed margins.
//! * [`odeexp`] — closed-form solution of the 2-dimensional mean ODE
//!   `x' = a x + b` through its characteristic roots.
//! * [`certify`] — construction of exponential drift tilts under which the
//!   expected volatility factor becomes negative at a chosen horizon,
//!   certifying that the untilted process reaches negative values with
//!   positive probability.
//! * [`novikov`] — integrability constants, step schedules and a feasibility
//!   check that back the martingale property of the tilt densities.
//! * [`montecarlo`] — deterministic parallel Euler simulation with the
//!   exponential density along each path, plus the statistical experiments
//!   built on it.
//! * [`report`] — reproducibility manifests for command-line runs.

pub mod canonical;
pub mod certify;
pub mod error;
pub mod feller;
pub mod model;
pub mod montecarlo;
pub mod novikov;
pub mod odeexp;
pub mod report;

pub use error::{Error, Result};
