//! Recovery of both layers' potential vorticity from noisy observations of
//! both streamfunctions.
//!
//! Observed variable: `X = [psi1; psi2]`; recovered: `Y = [q1; q2]`. The
//! state feedback `a1` is the discrete advection operator (block-diagonal,
//! layer `i` advected by `psi_i`), so `a1 vec(q) = -vec(J(psi, q))`. The
//! observation coupling follows from eliminating the streamfunction through
//! the elliptic relation of the *other* layer: each layer's observed tendency
//! splits into a `q`-independent part
//! `d(psi_j - (2/kd2) lap(psi_j))/dt` (estimated by a backward difference of
//! the observed fields) and the advection of the other layer scaled by
//! `2/kd2`, giving `A1` a purely cross-layer block structure.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::cgns::{
    sample_increment, spinup_moments, stack_pair, update_cov, update_mean, CgnsMatrices, CovMode,
    FilterMoments, FilterOp, NoiseConfig, SpinupTarget,
};
use crate::error::{Error, Result};
use crate::grid::{laplacian, GridSpec, ScalarField};
use crate::metrics::{corr, rmse, StepMetrics};
use crate::truth::{InitialCondition, PhysParams, QGState, TruthSim};

/// How the posterior mean is initialized after spin-up.
///
/// `PrefixStart` matches the workflow where the mean is set from the initial
/// field before the spin-up runs, leaving a finite initial error for the
/// filter to remove; `PrefixEnd` starts from the last spin-up state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanInit {
    PrefixStart,
    PrefixEnd,
}

impl Default for MeanInit {
    fn default() -> Self {
        MeanInit::PrefixStart
    }
}

#[derive(Debug, Clone)]
pub struct VorticityFilterConfig {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub noise: NoiseConfig,
    pub cov_mode: CovMode,
    pub ic: InitialCondition,
    pub mean_init: MeanInit,
    /// Steps between stored field snapshots (`None` = final state only).
    pub snapshot_stride: Option<usize>,
    /// Scales the synthesized observation noise; 1 is the model value, 0
    /// yields noise-free observations (the gain still uses `obs_noise`).
    pub obs_noise_scale: f64,
}

impl VorticityFilterConfig {
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
        }
    }
}

/// Truth/estimate field pair retained at snapshot steps.
#[derive(Debug, Clone)]
pub struct LabeledSnapshot {
    pub step: usize,
    pub fields: Vec<(String, ScalarField)>,
}

/// Output of a filter run: per-step metrics, strided snapshots, final
/// posterior moments, final truth state.
pub struct FilterRun {
    pub metrics: Vec<StepMetrics>,
    pub snapshots: Vec<LabeledSnapshot>,
    pub final_moments: FilterMoments,
    pub final_truth: QGState,
}

/// Advection operator for one layer: row `(k, l)` couples to the four
/// neighbors of the advected field with centered-difference weights of the
/// advecting streamfunction, divided by `4 h^2`.
pub fn advection_operator(psi: &ScalarField) -> CsMat<f64> {
    let grid = psi.grid();
    let n = grid.n();
    let m = grid.cells();
    let inv4h2 = 1.0 / (4.0 * grid.h() * grid.h());
    let mut tri = TriMat::with_capacity((m, m), 4 * m);
    for k in 0..n {
        let (kp, km) = ((k + 1) % n, (k + n - 1) % n);
        for l in 0..n {
            let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
            let row = grid.index(k, l);
            let dpsi_y = (psi.get(k, lp) - psi.get(k, lm)) * inv4h2;
            let dpsi_x = (psi.get(kp, l) - psi.get(km, l)) * inv4h2;
            // coefficients so that (a1 q)(k,l) = -J(psi, q)(k,l)
            tri.add_triplet(row, grid.index(kp, l), dpsi_y);
            tri.add_triplet(row, grid.index(km, l), -dpsi_y);
            tri.add_triplet(row, grid.index(k, lp), -dpsi_x);
            tri.add_triplet(row, grid.index(k, lm), dpsi_x);
        }
    }
    tri.to_csr()
}

/// Block-diagonal advection over both layers, `2 n^2` square.
pub fn assemble_a1_advection(psi1: &ScalarField, psi2: &ScalarField) -> Result<CsMat<f64>> {
    if psi1.grid().n() != psi2.grid().n() {
        return Err(Error::GridMismatch {
            expected: psi1.grid().n(),
            actual: psi2.grid().n(),
        });
    }
    let m = psi1.grid().cells();
    let b1 = advection_operator(psi1);
    let b2 = advection_operator(psi2);
    let mut tri = TriMat::with_capacity((2 * m, 2 * m), b1.nnz() + b2.nnz());
    for (row, vec) in b1.outer_iterator().enumerate() {
        for (col, &val) in vec.iter() {
            tri.add_triplet(row, col, val);
        }
    }
    for (row, vec) in b2.outer_iterator().enumerate() {
        for (col, &val) in vec.iter() {
            tri.add_triplet(m + row, m + col, val);
        }
    }
    Ok(tri.to_csr())
}

/// Cross-layer observation coupling: block `(1,2)` carries the layer-2
/// advection scaled by `2/kd2`, block `(2,1)` the layer-1 advection.
fn assemble_obs_coupling(psi1: &ScalarField, psi2: &ScalarField, kd2: f64) -> CsMat<f64> {
    let m = psi1.grid().cells();
    let scale = 2.0 / kd2;
    let b1 = advection_operator(psi1);
    let b2 = advection_operator(psi2);
    let mut tri = TriMat::with_capacity((2 * m, 2 * m), b1.nnz() + b2.nnz());
    for (row, vec) in b2.outer_iterator().enumerate() {
        for (col, &val) in vec.iter() {
            tri.add_triplet(row, m + col, scale * val);
        }
    }
    for (row, vec) in b1.outer_iterator().enumerate() {
        for (col, &val) in vec.iter() {
            tri.add_triplet(m + row, col, scale * val);
        }
    }
    tri.to_csr()
}

/// Filter matrices from two consecutive observed states.
pub fn assemble_vorticity_mats(
    prev: &QGState,
    cur: &QGState,
    params: &PhysParams,
    noise: &NoiseConfig,
) -> Result<CgnsMatrices> {
    if cur.step != prev.step + 1 {
        return Err(Error::InsufficientHistory(
            "vorticity assembly needs two consecutive observed states",
        ));
    }
    let m = cur.grid().cells();
    let scale = 2.0 / params.kd2;
    let phi = |psi: &ScalarField| {
        let lap = laplacian(psi);
        psi.add_scaled(&lap, -scale)
    };
    // layer-i row of the observation drift uses the other layer's fields
    let phi2_cur = phi(&cur.psi2)?;
    let phi2_prev = phi(&prev.psi2)?;
    let phi1_cur = phi(&cur.psi1)?;
    let phi1_prev = phi(&prev.psi1)?;
    let mut obs_drift = DVector::zeros(2 * m);
    for i in 0..m {
        obs_drift[i] = (phi2_cur.as_slice()[i] - phi2_prev.as_slice()[i]) / params.dt;
        obs_drift[m + i] = (phi1_cur.as_slice()[i] - phi1_prev.as_slice()[i]) / params.dt;
    }
    Ok(CgnsMatrices {
        obs_drift,
        obs_coupling: FilterOp::Sparse(assemble_obs_coupling(&cur.psi1, &cur.psi2, params.kd2)),
        state_drift: DVector::zeros(2 * m),
        state_coupling: FilterOp::Sparse(assemble_a1_advection(&cur.psi1, &cur.psi2)?),
        obs_noise: noise.obs_noise,
        model_noise: noise.model_noise,
    })
}

/// Stability cap for the explicit-Euler gain/Riccati update,
/// `0.5 B1^2 / (dt sigma_max(A1)^2)`.
fn stability_cap(mats: &CgnsMatrices, dt: f64) -> Option<f64> {
    let sigma = mats.obs_coupling.max_singular_bound();
    if sigma > 0.0 {
        Some(0.5 * mats.obs_noise * mats.obs_noise / (dt * sigma * sigma))
    } else {
        None
    }
}

/// Runs the vorticity-recovery filter: 1% of the steps are the pure-truth
/// spin-up, the rest assimilate noisy streamfunction increments.
pub fn run_vorticity_filter(config: &VorticityFilterConfig) -> Result<FilterRun> {
    config.params.validate()?;
    config.noise.validate()?;
    let n_steps = config.params.n_steps;
    let spinup = n_steps.div_ceil(100);
    if spinup < 2 {
        return Err(Error::InvalidParameter {
            name: "n_steps",
            reason: format!("need at least 101 steps for the 1% spin-up, got {n_steps}"),
        });
    }

    let mut sim = TruthSim::new(config.grid, config.params, config.ic)?;
    let mut prefix = Vec::with_capacity(spinup + 1);
    prefix.push(sim.state().clone());
    for _ in 0..spinup {
        prefix.push(sim.advance()?.clone());
    }

    let mut moments = spinup_moments(&prefix, SpinupTarget::Vorticity, config.cov_mode)?;
    if config.mean_init == MeanInit::PrefixStart {
        moments.mean = stack_pair(&prefix[0].q1, &prefix[0].q2);
    }

    let mut prev = prefix[spinup - 1].clone();
    let mut cur = prefix[spinup].clone();
    drop(prefix);

    let mut rng = ChaCha12Rng::seed_from_u64(config.noise.seed);
    let dt = config.params.dt;
    let dim = 2 * config.grid.cells();
    let smooth_interval = config.params.smooth_interval(config.grid);

    let mut metrics = Vec::with_capacity(n_steps - spinup);
    let mut snapshots = Vec::new();

    for step in spinup..n_steps {
        let mats = assemble_vorticity_mats(&prev, &cur, &config.params, &config.noise)?;
        let cap = stability_cap(&mats, dt);
        if step == spinup {
            if let Some(cap) = cap {
                moments.cov.clamp_max(cap);
            }
        }
        let next = sim.advance()?.clone();

        let mut dx = stack_pair(&next.psi1, &next.psi2) - stack_pair(&cur.psi1, &cur.psi2);
        if config.obs_noise_scale != 0.0 {
            dx += sample_increment(
                &mut rng,
                dim,
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
        let mut mean = update_mean(&moments, &mats, &dx, dt).map_err(step_err)?;
        let mut cov = update_cov(&moments, &mats, dt).map_err(step_err)?;
        if let Some(cap) = cap {
            cov.clamp_max(cap);
        }

        // the forecast model mirrors the truth model, including its
        // scale-selective smoothing of the vorticity anomaly
        if let Some(interval) = smooth_interval {
            if cur.step % interval == interval - 1 {
                let m = config.grid.cells();
                let f1 =
                    ScalarField::from_values(config.grid, mean.as_slice()[..m].to_vec())?;
                let f2 =
                    ScalarField::from_values(config.grid, mean.as_slice()[m..].to_vec())?;
                mean = stack_pair(
                    &config.params.smooth_q(&f1),
                    &config.params.smooth_q(&f2),
                );
            }
        }

        moments = FilterMoments { mean, cov };

        let truth_vec = stack_pair(&next.q1, &next.q2);
        metrics.push(StepMetrics {
            step: step + 1,
            rmse: rmse(moments.mean.as_slice(), truth_vec.as_slice())?,
            corr: corr(moments.mean.as_slice(), truth_vec.as_slice())?,
        });

        let take_snapshot = config
            .snapshot_stride
            .map(|s| s > 0 && (step + 1) % s == 0)
            .unwrap_or(false)
            || step + 1 == n_steps;
        if take_snapshot {
            let m = config.grid.cells();
            let mu1 = ScalarField::from_values(config.grid, moments.mean.as_slice()[..m].to_vec())?;
            let mu2 = ScalarField::from_values(config.grid, moments.mean.as_slice()[m..].to_vec())?;
            snapshots.push(LabeledSnapshot {
                step: step + 1,
                fields: vec![
                    ("psi1".into(), next.psi1.clone()),
                    ("psi2".into(), next.psi2.clone()),
                    ("q1".into(), next.q1.clone()),
                    ("q2".into(), next.q2.clone()),
                    ("mu_q1".into(), mu1),
                    ("mu_q2".into(), mu2),
                ],
            });
        }

        prev = cur;
        cur = next;
    }

    Ok(FilterRun {
        metrics,
        snapshots,
        final_moments: moments,
        final_truth: cur,
    })
}
