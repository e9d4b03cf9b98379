//! Deterministic two-layer quasi-geostrophic solver.
//!
//! Each layer carries a streamfunction `psi_i` and potential vorticity
//! `q_i = lap(psi_i) + beta*y + (kd2/2)(psi_j - psi_i)` with `j` the other
//! layer. Time stepping alternates an explicit advection update of `q` with
//! the elliptic inversion for `psi`; the inversion of layer `i` at step `m`
//! uses the other layer's streamfunction from step `m - 1`, which keeps the
//! two solves independent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{central_diff, jacobian, laplacian, Axis, GridSpec, HelmholtzOperator, ScalarField, SharedHelmholtz};

/// Physical and stepping parameters.
///
/// The explicit centered advection scheme has no intrinsic dissipation and
/// the reference initial patterns are not periodic on the unit square, so
/// long runs need a weak scale-selective filter: a 5x5 binomial kernel
/// applied to the vorticity anomaly `q - beta*y` once every
/// `h^2 / (smooth_nu * dt)` steps, which acts like an eddy viscosity of
/// strength `smooth_nu` independent of resolution. `smooth_nu: None` runs the
/// bare scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Square of the deformation wavenumber.
    pub kd2: f64,
    /// Planetary vorticity gradient.
    pub beta: f64,
    /// Time step.
    pub dt: f64,
    /// Number of time steps.
    pub n_steps: usize,
    /// Effective viscosity of the anomaly smoothing filter.
    pub smooth_nu: Option<f64>,
    /// Smoothing passes applied to the initial vorticity anomaly.
    pub smooth_init_passes: usize,
}

impl Default for PhysParams {
    fn default() -> Self {
        Self {
            kd2: 10.0,
            beta: 0.1,
            dt: 1e-4,
            n_steps: 20_000,
            smooth_nu: Some(0.04),
            smooth_init_passes: 1,
        }
    }
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd2 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "kd2",
                reason: format!("must be > 0, got {}", self.kd2),
            });
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be > 0, got {}", self.dt),
            });
        }
        if let Some(nu) = self.smooth_nu {
            if !(nu > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "smooth_nu",
                    reason: format!("must be > 0 when set, got {nu}"),
                });
            }
        }
        Ok(())
    }

    /// Steps between smoothing passes on the given grid, `h^2/(nu*dt)`.
    pub fn smooth_interval(&self, grid: GridSpec) -> Option<usize> {
        self.smooth_nu.map(|nu| {
            let h = grid.h();
            ((h * h / (nu * self.dt)).round() as usize).max(1)
        })
    }

    /// One smoothing pass on the vorticity anomaly `q - beta*y`; the planetary
    /// gradient itself is untouched, which keeps the no-flow state an exact
    /// fixed point.
    pub fn smooth_q(&self, q: &ScalarField) -> ScalarField {
        let grid = q.grid();
        let h = grid.h();
        let anomaly =
            ScalarField::from_fn(grid, |k, l| q.get(k, l) - self.beta * l as f64 * h);
        let smoothed = crate::grid::binomial_smooth5(&anomaly);
        ScalarField::from_fn(grid, |k, l| smoothed.get(k, l) + self.beta * l as f64 * h)
    }
}

/// Initial streamfunction pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialCondition {
    /// Asymmetric sinusoidal pattern; develops chaotic advection.
    Sinusoidal,
    /// Symmetric Gaussian bumps; stays smooth, useful as a sanity case.
    Gaussian,
}

impl std::str::FromStr for InitialCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::InvalidParameter {
                name: "ic",
                reason: format!("unknown initial condition `{other}` (expected sinusoidal|gaussian)"),
            }),
        }
    }
}

/// Full model state at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct QGState {
    pub psi1: ScalarField,
    pub psi2: ScalarField,
    pub q1: ScalarField,
    pub q2: ScalarField,
    pub step: usize,
}

impl QGState {
    pub fn grid(&self) -> GridSpec {
        self.psi1.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.psi1.is_finite() && self.psi2.is_finite() && self.q1.is_finite() && self.q2.is_finite()
    }
}

/// Samples the initial streamfunctions at the grid nodes and diagnoses the
/// matching vorticity fields.
pub fn init_state(grid: GridSpec, params: &PhysParams, ic: InitialCondition) -> QGState {
    let h = grid.h();
    let (psi1, psi2) = match ic {
        InitialCondition::Sinusoidal => {
            use std::f64::consts::PI;
            let psi1 = ScalarField::from_fn(grid, |k, l| {
                let (x, y) = (k as f64 * h, l as f64 * h);
                -(1.2 * PI * x).sin() * (1.5 * PI * y).sin()
                    + 0.6 * (2.3 * PI * x).cos() * (2.8 * PI * y).cos()
            });
            let psi2 = ScalarField::from_fn(grid, |k, l| {
                let (x, y) = (k as f64 * h, l as f64 * h);
                (3.1 * PI * x).sin() * (0.8 * PI * y).sin()
                    + 0.7 * (1.6 * PI * x).cos() * (2.4 * PI * y).cos()
            });
            (psi1, psi2)
        }
        InitialCondition::Gaussian => {
            let s = 1.0 / 8.0;
            let psi1 = ScalarField::from_fn(grid, |k, l| {
                let (dx, dy) = (k as f64 * h - 0.5, l as f64 * h - 0.5);
                (-(2.0 * dx * dx + dy * dy) / (2.0 * s * s)).exp()
            });
            let psi2 = ScalarField::from_fn(grid, |k, l| {
                let (dx, dy) = (k as f64 * h - 0.5, l as f64 * h - 0.5);
                (-(dx * dx + 4.0 * dy * dy) / (3.0 * s * s)).exp()
            });
            (psi1, psi2)
        }
    };
    let (q1, q2) = diagnose_q(&psi1, &psi2, params);
    QGState {
        psi1,
        psi2,
        q1,
        q2,
        step: 0,
    }
}

/// Potential vorticity from the streamfunctions:
/// `q_i = lap(psi_i) + beta*y + (kd2/2)(psi_j - psi_i)`.
pub fn diagnose_q(
    psi1: &ScalarField,
    psi2: &ScalarField,
    params: &PhysParams,
) -> (ScalarField, ScalarField) {
    (
        diagnose_q_layer(psi1, psi2, params),
        diagnose_q_layer(psi2, psi1, params),
    )
}

/// Single-layer version of [`diagnose_q`]: `own` is the layer being diagnosed,
/// `other` the coupled layer.
pub fn diagnose_q_layer(own: &ScalarField, other: &ScalarField, params: &PhysParams) -> ScalarField {
    let grid = own.grid();
    let h = grid.h();
    let lap = laplacian(own);
    let half_kd2 = params.kd2 / 2.0;
    ScalarField::from_fn(grid, |k, l| {
        lap.get(k, l) + params.beta * l as f64 * h + half_kd2 * (other.get(k, l) - own.get(k, l))
    })
}

/// Largest centered-difference velocity component over both layers.
pub fn max_velocity(state: &QGState) -> f64 {
    let mut u_max: f64 = 0.0;
    for psi in [&state.psi1, &state.psi2] {
        for axis in [Axis::X, Axis::Y] {
            u_max = u_max.max(central_diff(psi, axis).max_abs());
        }
    }
    u_max
}

fn check_cfl(state: &QGState, params: &PhysParams) -> Result<()> {
    let u_max = max_velocity(state);
    let h = state.grid().h();
    let ratio = u_max * params.dt / h;
    if ratio > 1.0 {
        return Err(Error::CflViolation {
            step: state.step,
            u_max,
            dt: params.dt,
            h,
            ratio,
        });
    }
    Ok(())
}

/// Explicit advection update `q_i <- q_i - dt * J(psi_i, q_i)` for both
/// layers. The CFL bound is re-estimated every 100 steps.
pub fn step_q(state: &QGState, params: &PhysParams) -> Result<(ScalarField, ScalarField)> {
    if state.step % 100 == 0 {
        check_cfl(state, params)?;
    }
    let j1 = jacobian(&state.psi1, &state.q1)?;
    let j2 = jacobian(&state.psi2, &state.q2)?;
    Ok((
        state.q1.add_scaled(&j1, -params.dt)?,
        state.q2.add_scaled(&j2, -params.dt)?,
    ))
}

/// Streamfunction inversion for both layers given the advanced vorticity.
/// The coupling term lags: layer `i` is solved against the other layer's
/// current streamfunction.
pub fn step_psi(
    state: &QGState,
    q_next: &(ScalarField, ScalarField),
    op: &HelmholtzOperator,
    params: &PhysParams,
) -> Result<(ScalarField, ScalarField)> {
    let psi1 = op.invert_psi(&q_next.0, &state.psi2, params.beta)?;
    let psi2 = op.invert_psi(&q_next.1, &state.psi1, params.beta)?;
    Ok((psi1, psi2))
}

/// Streaming truth integrator; the Helmholtz factorization is computed once
/// at construction and shared.
pub struct TruthSim {
    op: SharedHelmholtz,
    params: PhysParams,
    smooth_interval: Option<usize>,
    state: QGState,
}

impl TruthSim {
    pub fn new(grid: GridSpec, params: PhysParams, ic: InitialCondition) -> Result<Self> {
        params.validate()?;
        let op = Arc::new(HelmholtzOperator::new(grid, params.kd2)?);
        Self::with_operator(op, params, ic)
    }

    pub fn with_operator(
        op: SharedHelmholtz,
        params: PhysParams,
        ic: InitialCondition,
    ) -> Result<Self> {
        let mut state = init_state(op.grid(), &params, ic);
        if params.smooth_nu.is_some() && params.smooth_init_passes > 0 {
            for _ in 0..params.smooth_init_passes {
                state.q1 = params.smooth_q(&state.q1);
                state.q2 = params.smooth_q(&state.q2);
            }
            // re-solve the streamfunctions so (psi, q) stay consistent
            let psi1 = op.invert_psi(&state.q1, &state.psi2, params.beta)?;
            let psi2 = op.invert_psi(&state.q2, &state.psi1, params.beta)?;
            state.psi1 = psi1;
            state.psi2 = psi2;
        }
        Ok(Self {
            op: Arc::clone(&op),
            params,
            smooth_interval: params.smooth_interval(op.grid()),
            state,
        })
    }

    pub fn state(&self) -> &QGState {
        &self.state
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn operator(&self) -> SharedHelmholtz {
        Arc::clone(&self.op)
    }

    /// Advances one step and returns the new state.
    pub fn advance(&mut self) -> Result<&QGState> {
        let mut q_next = step_q(&self.state, &self.params)?;
        if let Some(interval) = self.smooth_interval {
            if self.state.step % interval == interval - 1 {
                q_next.0 = self.params.smooth_q(&q_next.0);
                q_next.1 = self.params.smooth_q(&q_next.1);
            }
        }
        let (psi1, psi2) = step_psi(&self.state, &q_next, &self.op, &self.params)?;
        self.state = QGState {
            psi1,
            psi2,
            q1: q_next.0,
            q2: q_next.1,
            step: self.state.step + 1,
        };
        if !self.state.is_finite() {
            return Err(Error::NonFinite {
                what: "truth state",
                step: self.state.step,
            });
        }
        Ok(&self.state)
    }
}

/// Runs the truth solver and collects every state, initial state included.
/// Intended for desk-scale runs; large runs should stream via [`TruthSim`].
pub fn run_truth(
    grid: GridSpec,
    params: PhysParams,
    ic: InitialCondition,
) -> Result<Vec<QGState>> {
    let mut sim = TruthSim::new(grid, params, ic)?;
    let mut states = Vec::with_capacity(params.n_steps + 1);
    states.push(sim.state().clone());
    for _ in 0..params.n_steps {
        states.push(sim.advance()?.clone());
    }
    Ok(states)
}
