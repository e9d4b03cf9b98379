//! Two-layer quasi-geostrophic flow simulation with continuous-time
//! conditional-Gaussian filtering.
//!
//! The crate provides:
//! - an explicit finite-difference solver for the two-layer QG equations on a
//!   doubly periodic unit square ([`truth`]),
//! - a conditional-Gaussian filter core integrating closed-form mean and
//!   covariance equations ([`cgns`]),
//! - two field-recovery drivers: vorticity from observed streamfunctions
//!   ([`vorticity`]) and the unobserved second-layer streamfunction from the
//!   top layer alone ([`layer2`]),
//! - a Lagrangian particle tracer with linear drag ([`particles`]),
//! - normalized error/correlation metrics ([`metrics`]) and a run/sweep
//!   harness with on-disk formats ([`harness`]).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cgns;
pub mod error;
pub mod grid;
pub mod harness;
pub mod layer2;
pub mod metrics;
pub mod particles;
pub mod truth;
pub mod vorticity;

pub use error::{Error, Result};
pub use grid::{central_diff, jacobian, laplacian, Axis, GridSpec, HelmholtzOperator, ScalarField};
pub use truth::{
    diagnose_q, init_state, run_truth, step_psi, step_q, InitialCondition, PhysParams, QGState,
    TruthSim,
};
