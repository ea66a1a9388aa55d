//! Dual ensemble Kalman filter methods for linear-quadratic stochastic
//! optimal control.
//!
//! The crate learns optimal controllers for LQG and LEQG (risk-sensitive)
//! problems from a black-box simulator. A backward-in-time interacting
//! particle system is run so that the ensemble's empirical covariance tracks
//! the inverse of the Riccati solution; the recovered matrix then yields the
//! optimal feedback gain, either directly (when the input matrix is known) or
//! through simulator probing of an empirical Q-function.
//!
//! Modules:
//! - [`model`]: the linear-quadratic problem family and its validation.
//! - [`riccati`]: deterministic Riccati solvers used as ground truth.
//! - [`enkf`]: the offline dual ensemble Kalman filter.
//! - [`control`]: gain extraction, Q-function probing, closed-loop rollout.
//! - [`metrics`]: error metrics, scaling fits, cost evaluation.
//! - [`bench`]: benchmark generators, experiment orchestration, reports.

pub mod bench;
pub mod control;
pub mod enkf;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod riccati;
pub mod rng;

pub use model::{CostKind, CostModel, Horizon, LinearDynamics, LqProblem};
