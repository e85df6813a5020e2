//! Performance index shaping for infinite-horizon optimal control.
//!
//! Starting from a solved nominal problem (value function `phi0` and law
//! `u0 = -1/2 R^-1 g' grad(phi0)`), the performance index is augmented with a
//! tunable term `mbar(x, theta) + 1/4 |R^-1 g' grad h|_R^2` where `h` solves the
//! linear first-order PDE `grad(h)' F_cl = -mbar` along the nominal closed-loop
//! field `F_cl`. The shaped value function is then `phi0 + h` in closed form, so
//! tuning `theta` against trajectory-level objectives never re-solves an HJB
//! equation.
//!
//! Module map:
//! - [`polybasis`]: even-degree monomial bases
//! - [`dynamics`]: control-affine systems with analytic Jacobians
//! - [`simulate`]: fixed-step RK4 rollouts
//! - [`nominal`]: Riccati and polynomial policy-iteration nominal solvers
//! - [`shaping`]: collocation solve for `h` and the shaped law
//! - [`objective`]: trajectory-level design objectives
//! - [`tuning`]: forward sensitivities and gradient descent over `theta`
//! - [`verify`]: numerical stability checks

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod nominal;
pub mod objective;
pub mod polybasis;
pub mod sampling;
pub mod shaping;
pub mod simulate;
pub mod tuning;
pub mod verify;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
