//! Lagrangian ice-floe tracer: particles dragged by the layer flow with a
//! linear drag law and stochastic position noise,
//!
//! ```text
//! dx = v dt + sigma_x dW
//! dv = drag_beta (u(x) - v) dt
//! ```
//!
//! with `u = (-dpsi/dy, dpsi/dx)` interpolated bilinearly and positions
//! wrapped into the unit square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{central_diff, Axis, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub count: usize,
    /// Ocean drag coefficient (distinct from the planetary beta).
    pub drag_beta: f64,
    /// Position noise amplitude.
    pub sigma_x: f64,
    pub seed: u64,
    /// Which layer's streamfunction drives the particles.
    pub layer: u8,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            count: 64,
            drag_beta: 0.1,
            sigma_x: 0.01,
            seed: 1,
            layer: 1,
        }
    }
}

impl ParticleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParameter {
                name: "count",
                reason: "need at least one particle".into(),
            });
        }
        if !(self.drag_beta >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "drag_beta",
                reason: format!("must be >= 0, got {}", self.drag_beta),
            });
        }
        if !(self.layer == 1 || self.layer == 2) {
            return Err(Error::InvalidParameter {
                name: "layer",
                reason: format!("must be 1 or 2, got {}", self.layer),
            });
        }
        Ok(())
    }
}

/// Particle positions in `[0,1)^2` and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl ParticleSet {
    /// Uniform random positions, zero velocities; draws from a dedicated
    /// stream so stepping noise is unaffected by the count.
    pub fn seeded(config: &ParticleConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let positions = (0..config.count)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        Ok(Self {
            positions,
            velocities: vec![[0.0, 0.0]; config.count],
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Velocity components of the flow: `u = -dpsi/dy`, `v = dpsi/dx`.
pub fn velocity_field(psi: &ScalarField) -> (ScalarField, ScalarField) {
    let u = central_diff(psi, Axis::Y).scale(-1.0);
    let v = central_diff(psi, Axis::X);
    (u, v)
}

/// Bilinear interpolation with periodic wrap of the four surrounding nodes.
pub fn interp_velocity(u: &ScalarField, v: &ScalarField, pos: [f64; 2]) -> (f64, f64) {
    (interp_scalar(u, pos), interp_scalar(v, pos))
}

fn interp_scalar(f: &ScalarField, pos: [f64; 2]) -> f64 {
    let grid = f.grid();
    let n = grid.n();
    let x = pos[0].rem_euclid(1.0) / grid.h();
    let y = pos[1].rem_euclid(1.0) / grid.h();
    let k0 = (x.floor() as usize) % n;
    let l0 = (y.floor() as usize) % n;
    let (k1, l1) = ((k0 + 1) % n, (l0 + 1) % n);
    let fx = x - x.floor();
    let fy = y - y.floor();
    f.get(k0, l0) * (1.0 - fx) * (1.0 - fy)
        + f.get(k1, l0) * fx * (1.0 - fy)
        + f.get(k0, l1) * (1.0 - fx) * fy
        + f.get(k1, l1) * fx * fy
}

/// Steps particles; holds one noise substream per particle so trajectories
/// are reproducible independently of iteration order.
pub struct ParticleTracer {
    config: ParticleConfig,
    streams: Vec<ChaCha12Rng>,
}

impl ParticleTracer {
    pub fn new(config: ParticleConfig) -> Result<Self> {
        config.validate()?;
        let streams = (0..config.count)
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        Ok(Self { config, streams })
    }

    pub fn config(&self) -> &ParticleConfig {
        &self.config
    }

    /// One Euler-Maruyama step. The drag relaxes each particle velocity
    /// toward the flow sampled at its pre-move position.
    pub fn step(
        &mut self,
        pset: &ParticleSet,
        u: &ScalarField,
        v: &ScalarField,
        dt: f64,
    ) -> Result<ParticleSet> {
        if pset.len() != self.config.count {
            return Err(Error::InvalidParameter {
                name: "count",
                reason: format!(
                    "particle set has {} particles, tracer configured for {}",
                    pset.len(),
                    self.config.count
                ),
            });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be > 0, got {dt}"),
            });
        }
        let noise = self.config.sigma_x * dt.sqrt();
        let mut out = pset.clone();
        for i in 0..pset.len() {
            let pos = pset.positions[i];
            let vel = pset.velocities[i];
            let rng = &mut self.streams[i];
            let dx = vel[0] * dt + noise * rng.sample::<f64, _>(StandardNormal);
            let dy = vel[1] * dt + noise * rng.sample::<f64, _>(StandardNormal);
            out.positions[i] = [(pos[0] + dx).rem_euclid(1.0), (pos[1] + dy).rem_euclid(1.0)];
            let (fu, fv) = interp_velocity(u, v, pos);
            out.velocities[i] = [
                vel[0] + self.config.drag_beta * (fu - vel[0]) * dt,
                vel[1] + self.config.drag_beta * (fv - vel[1]) * dt,
            ];
        }
        Ok(out)
    }
}
