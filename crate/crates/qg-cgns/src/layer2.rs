//! Recovery of the unobserved second-layer streamfunction from noisy
//! observations of the top layer alone.
//!
//! Observed variable: `X = psi1`; recovered: `Y = psi2`. Both tendencies are
//! expressed through the stored elliptic inversion instead of the governing
//! equations directly. Differencing the layer-1 inversion between steps gives
//!
//! ```text
//! d psi1 = A^-1 h^2 (q1[n+1] - q1[n] - (kd2/2)(psi2[n] - psi2[n-1]))
//! ```
//!
//! whose `psi2[n]`-dependent part defines `A1 = -(h^2 kd2 / 2 dt) A^-1` and
//! the rest `A0`. The `Y` tendency uses the same difference one step back
//! (`d psi2 = psi2[n] - psi2[n-1]`), which involves only already-known
//! quantities, so `a1` is exactly zero and the covariance evolution is
//! independent of the observations.
//!
//! Since the true `psi2` is unavailable at filter time, the driver maintains
//! a model-propagated proxy: `q2` advected by the posterior-mean flow and
//! re-inverted through the elliptic relation, gently nudged toward the
//! posterior mean. The proxy supplies the `psi2`/`q2` history entering the
//! matrix assembly.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::cgns::{
    sample_increment, spinup_moments, update_cov, update_mean, CgnsMatrices, CovMode,
    FilterMoments, FilterOp, NoiseConfig, SpinupTarget,
};
use crate::error::{Error, Result};
use crate::grid::{jacobian, GridSpec, ScalarField, SharedHelmholtz};
use crate::metrics::{corr, rmse, StepMetrics};
use crate::truth::{diagnose_q_layer, InitialCondition, PhysParams, TruthSim};
use crate::vorticity::{FilterRun, LabeledSnapshot, MeanInit};

#[derive(Debug, Clone)]
pub struct Layer2FilterConfig {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub noise: NoiseConfig,
    pub cov_mode: CovMode,
    pub ic: InitialCondition,
    pub mean_init: MeanInit,
    pub snapshot_stride: Option<usize>,
    /// Scales the synthesized observation noise (0 = clean observations).
    pub obs_noise_scale: f64,
    /// Relaxation rate of the proxy vorticity chain toward the posterior
    /// mean, per step.
    pub proxy_nudge: f64,
}

impl Layer2FilterConfig {
    pub fn new(grid: GridSpec, params: PhysParams, noise: NoiseConfig) -> Self {
        Self {
            grid,
            params,
            noise,
            cov_mode: CovMode::Diagonal,
            ic: InitialCondition::Sinusoidal,
            mean_init: MeanInit::default(),
            snapshot_stride: None,
            obs_noise_scale: 1.0,
            proxy_nudge: 0.02,
        }
    }
}

/// Field history entering one matrix assembly. Time indices are relative to
/// the current filter step `n`.
#[derive(Debug, Clone)]
pub struct Layer2History {
    /// Prognostic layer-1 vorticity at `n + 1`.
    pub q1_next: ScalarField,
    /// Diagnosed layer-1 vorticity at `n`.
    pub q1_cur: ScalarField,
    /// Proxy layer-2 vorticity at `n`.
    pub q2_cur: ScalarField,
    /// Proxy layer-2 vorticity at `n - 1`.
    pub q2_prev: ScalarField,
    /// Second-layer estimate at `n - 1`.
    pub psi2_prev: ScalarField,
    /// Observed layer-1 streamfunction at `n - 1`.
    pub psi1_prev: ScalarField,
    /// Observed layer-1 streamfunction at `n - 2`.
    pub psi1_prev2: ScalarField,
}

/// Filter matrices for the second-layer recovery. `a1` is exactly the zero
/// operator; `A1` wraps the shared factorization and is step-invariant.
pub fn assemble_layer2_mats(
    hist: &Layer2History,
    op: &SharedHelmholtz,
    params: &PhysParams,
    noise: &NoiseConfig,
) -> Result<CgnsMatrices> {
    let grid = op.grid();
    let m = grid.cells();
    for f in [
        &hist.q1_next,
        &hist.q1_cur,
        &hist.q2_cur,
        &hist.q2_prev,
        &hist.psi2_prev,
        &hist.psi1_prev,
        &hist.psi1_prev2,
    ] {
        if f.grid().n() != grid.n() {
            return Err(Error::GridMismatch {
                expected: grid.n(),
                actual: f.grid().n(),
            });
        }
    }
    let h2 = grid.h() * grid.h();
    let half_kd2 = params.kd2 / 2.0;

    let mut obs_rhs = vec![0.0; m];
    let mut state_rhs = vec![0.0; m];
    for i in 0..m {
        obs_rhs[i] = h2
            * (hist.q1_next.as_slice()[i] - hist.q1_cur.as_slice()[i]
                + half_kd2 * hist.psi2_prev.as_slice()[i]);
        state_rhs[i] = h2
            * (hist.q2_cur.as_slice()[i]
                - hist.q2_prev.as_slice()[i]
                - half_kd2 * (hist.psi1_prev.as_slice()[i] - hist.psi1_prev2.as_slice()[i]));
    }
    let obs_drift = DVector::from_vec(op.solve(&obs_rhs)?) / params.dt;
    let state_drift = DVector::from_vec(op.solve(&state_rhs)?) / params.dt;

    Ok(CgnsMatrices {
        obs_drift,
        obs_coupling: FilterOp::ScaledSolve {
            scale: -(h2 * params.kd2) / (2.0 * params.dt),
            op: SharedHelmholtz::clone(op),
        },
        state_drift,
        state_coupling: FilterOp::Zero { rows: m, cols: m },
        obs_noise: noise.obs_noise,
        model_noise: noise.model_noise,
    })
}

fn as_field(grid: GridSpec, v: &DVector<f64>) -> Result<ScalarField> {
    ScalarField::from_values(grid, v.as_slice().to_vec())
}

/// Runs the second-layer recovery filter (spin-up, then assimilation of
/// noisy `d psi1` increments).
pub fn run_layer2_filter(config: &Layer2FilterConfig) -> Result<FilterRun> {
    config.params.validate()?;
    config.noise.validate()?;
    if !(0.0..=1.0).contains(&config.proxy_nudge) {
        return Err(Error::InvalidParameter {
            name: "proxy_nudge",
            reason: format!("must be in [0, 1], got {}", config.proxy_nudge),
        });
    }
    let n_steps = config.params.n_steps;
    let spinup = n_steps.div_ceil(100);
    if spinup < 2 {
        return Err(Error::InvalidParameter {
            name: "n_steps",
            reason: format!("need at least 101 steps for the 1% spin-up, got {n_steps}"),
        });
    }

    let mut sim = TruthSim::new(config.grid, config.params, config.ic)?;
    let op = sim.operator();
    let mut prefix = Vec::with_capacity(spinup + 1);
    prefix.push(sim.state().clone());
    for _ in 0..spinup {
        prefix.push(sim.advance()?.clone());
    }

    let mut moments = spinup_moments(&prefix, SpinupTarget::SecondLayer, config.cov_mode)?;
    if config.mean_init == MeanInit::PrefixStart {
        moments.mean = DVector::from_column_slice(prefix[0].psi2.as_slice());
    }

    // explicit-update stability cap: sigma_max(A1) = 1/dt exactly
    let cap = 0.5 * config.noise.obs_noise * config.noise.obs_noise * config.params.dt;
    moments.cov.clamp_max(cap);

    // proxy chain and observed history from the spin-up tail
    let mut psi1_prev2 = prefix[spinup - 2].psi1.clone();
    let mut psi1_prev = prefix[spinup - 1].psi1.clone();
    let mut psi1_cur = prefix[spinup].psi1.clone();
    let mut psi2_est_prev = prefix[spinup - 1].psi2.clone();
    let mut q2_prev = prefix[spinup - 1].q2.clone();
    let mut q2_cur = prefix[spinup].q2.clone();
    drop(prefix);

    let mut rng = ChaCha12Rng::seed_from_u64(config.noise.seed);
    let dt = config.params.dt;
    let m = config.grid.cells();
    let smooth_interval = config.params.smooth_interval(config.grid);

    let mut metrics = Vec::with_capacity(n_steps - spinup);
    let mut snapshots = Vec::new();
    let mut last_truth = sim.state().clone();

    for step in spinup..n_steps {
        // layer-1 vorticity: diagnose at n (lag-consistent with psi2 at n-1),
        // then one prognostic advection step
        let q1_cur = diagnose_q_layer(&psi1_cur, &psi2_est_prev, &config.params);
        let mut q1_next = q1_cur.add_scaled(&jacobian(&psi1_cur, &q1_cur)?, -dt)?;
        let smooth_now = smooth_interval
            .map(|interval| step % interval == interval - 1)
            .unwrap_or(false);
        if smooth_now {
            q1_next = config.params.smooth_q(&q1_next);
        }

        let hist = Layer2History {
            q1_next: q1_next.clone(),
            q1_cur,
            q2_cur: q2_cur.clone(),
            q2_prev: q2_prev.clone(),
            psi2_prev: psi2_est_prev.clone(),
            psi1_prev: psi1_prev.clone(),
            psi1_prev2: psi1_prev2.clone(),
        };
        let mats = assemble_layer2_mats(&hist, &op, &config.params, &config.noise)?;

        let next = sim.advance()?.clone();
        let mut dx = DVector::from_column_slice(next.psi1.as_slice())
            - DVector::from_column_slice(psi1_cur.as_slice());
        if config.obs_noise_scale != 0.0 {
            dx += sample_increment(
                &mut rng,
                m,
                config.noise.obs_noise * config.obs_noise_scale,
                dt,
            );
        }

        let step_err = |e: Error| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                step: step + 1,
            },
            other => other,
        };
        let mean = update_mean(&moments, &mats, &dx, dt).map_err(step_err)?;
        let mut cov = update_cov(&moments, &mats, dt).map_err(step_err)?;
        cov.clamp_max(cap);

        // proxy chain: relax toward the posterior, advect with the
        // posterior-mean flow (mirroring the model's smoothing), re-invert
        let mu_field = as_field(config.grid, &moments.mean)?;
        if config.proxy_nudge > 0.0 {
            let anchor = diagnose_q_layer(&mu_field, &psi1_prev, &config.params);
            q2_cur = ScalarField::from_fn(config.grid, |k, l| {
                q2_cur.get(k, l) + config.proxy_nudge * (anchor.get(k, l) - q2_cur.get(k, l))
            });
        }
        let mut q2_next = q2_cur.add_scaled(&jacobian(&mu_field, &q2_cur)?, -dt)?;
        if smooth_now {
            q2_next = config.params.smooth_q(&q2_next);
        }
        let psi2_est_cur = op.invert_psi(&q2_next, &psi1_cur, config.params.beta)?;

        moments = FilterMoments { mean, cov };

        metrics.push(StepMetrics {
            step: step + 1,
            rmse: rmse(moments.mean.as_slice(), next.psi2.as_slice())?,
            corr: corr(moments.mean.as_slice(), next.psi2.as_slice())?,
        });

        let take_snapshot = config
            .snapshot_stride
            .map(|s| s > 0 && (step + 1) % s == 0)
            .unwrap_or(false)
            || step + 1 == n_steps;
        if take_snapshot {
            snapshots.push(LabeledSnapshot {
                step: step + 1,
                fields: vec![
                    ("psi1".into(), next.psi1.clone()),
                    ("psi2".into(), next.psi2.clone()),
                    ("mu_psi2".into(), as_field(config.grid, &moments.mean)?),
                ],
            });
        }

        // roll the histories
        q2_prev = q2_cur;
        q2_cur = q2_next;
        psi2_est_prev = psi2_est_cur;
        psi1_prev2 = psi1_prev;
        psi1_prev = psi1_cur;
        psi1_cur = next.psi1.clone();
        last_truth = next;
    }

    Ok(FilterRun {
        metrics,
        snapshots,
        final_moments: moments,
        final_truth: last_truth,
    })
}
