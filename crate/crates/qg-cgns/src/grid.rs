//! Uniform doubly periodic grid, second-order stencils, and the shifted
//! Helmholtz operator behind the streamfunction inversion.
//!
//! Fields live on an `n x n` grid over the unit square with spacing
//! `h = 1/n`. Cell `(k, l)` sits at `(x, y) = (k*h, l*h)` and is stored
//! row-major at `k*n + l`. Every stencil wraps indices modulo `n` in both
//! directions.

use std::sync::Arc;

use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

/// Square periodic grid: `n` nodes per side, spacing `h = 1/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    n: usize,
    h: f64,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidParameter {
                name: "n",
                reason: format!("need at least 4 nodes per side, got {n}"),
            });
        }
        Ok(Self {
            n,
            h: 1.0 / n as f64,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of cells, `n^2`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn index(&self, k: usize, l: usize) -> usize {
        k * self.n + l
    }

    /// Field of node y-coordinates, `y_l = l*h`.
    pub fn y_coords(&self) -> ScalarField {
        ScalarField::from_fn(*self, |_, l| l as f64 * self.h)
    }
}

/// One real value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

/// Differentiation axis for [`central_diff`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.cells()],
        }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.cells()],
        }
    }

    /// Builds a field from a function of the integer node indices `(k, l)`.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(grid.cells());
        for k in 0..n {
            for l in 0..n {
                values.push(f(k, l));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::GridMismatch {
                expected: grid.cells(),
                actual: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[self.grid.index(k, l)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, value: f64) {
        let idx = self.grid.index(k, l);
        self.values[idx] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + scale * other`, element-wise.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Result<Self> {
        check_same_grid(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

fn check_same_grid(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.grid.n() != b.grid.n() {
        return Err(Error::GridMismatch {
            expected: a.grid.n(),
            actual: b.grid.n(),
        });
    }
    Ok(())
}

/// Second-order centered difference with periodic wrap:
/// `out(k,l) = (f(k+1,l) - f(k-1,l)) / 2h` along x, analogous along y.
pub fn central_diff(f: &ScalarField, axis: Axis) -> ScalarField {
    let grid = f.grid();
    let n = grid.n();
    let inv2h = 1.0 / (2.0 * grid.h());
    let mut out = ScalarField::zeros(grid);
    for k in 0..n {
        let (kp, km) = ((k + 1) % n, (k + n - 1) % n);
        for l in 0..n {
            let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
            let d = match axis {
                Axis::X => f.get(kp, l) - f.get(km, l),
                Axis::Y => f.get(k, lp) - f.get(k, lm),
            };
            out.set(k, l, d * inv2h);
        }
    }
    out
}

/// Five-point Laplacian with periodic wrap:
/// `(f(k+1,l) + f(k-1,l) + f(k,l+1) + f(k,l-1) - 4 f(k,l)) / h^2`.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let grid = f.grid();
    let n = grid.n();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let mut out = ScalarField::zeros(grid);
    for k in 0..n {
        let (kp, km) = ((k + 1) % n, (k + n - 1) % n);
        for l in 0..n {
            let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
            let s = f.get(kp, l) + f.get(km, l) + f.get(k, lp) + f.get(k, lm) - 4.0 * f.get(k, l);
            out.set(k, l, s * inv_h2);
        }
    }
    out
}

/// Discrete advection Jacobian
/// `J(psi, q) = psi_x q_y - psi_y q_x` built from centered differences; the
/// expanded stencil is `((psi_r - psi_l)(q_u - q_d) - (psi_u - psi_d)(q_r - q_l)) / 4h^2`.
pub fn jacobian(psi: &ScalarField, q: &ScalarField) -> Result<ScalarField> {
    check_same_grid(psi, q)?;
    let grid = psi.grid();
    let n = grid.n();
    let inv4h2 = 1.0 / (4.0 * grid.h() * grid.h());
    let mut out = ScalarField::zeros(grid);
    for k in 0..n {
        let (kp, km) = ((k + 1) % n, (k + n - 1) % n);
        for l in 0..n {
            let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
            let dpsi_x = psi.get(kp, l) - psi.get(km, l);
            let dpsi_y = psi.get(k, lp) - psi.get(k, lm);
            let dq_x = q.get(kp, l) - q.get(km, l);
            let dq_y = q.get(k, lp) - q.get(k, lm);
            out.set(k, l, (dpsi_x * dq_y - dpsi_y * dq_x) * inv4h2);
        }
    }
    Ok(out)
}

/// One pass of the 5x5 binomial smoothing kernel with periodic wrap: the
/// separable product of `(1, 4, 6, 4, 1)/16` along each axis.
pub fn binomial_smooth5(f: &ScalarField) -> ScalarField {
    const W: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let grid = f.grid();
    let n = grid.n();
    let mut tmp = ScalarField::zeros(grid);
    for k in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for (i, w) in W.iter().enumerate() {
                acc += w * f.get((k + n + i - 2) % n, l);
            }
            tmp.set(k, l, acc);
        }
    }
    let mut out = ScalarField::zeros(grid);
    for k in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for (i, w) in W.iter().enumerate() {
                acc += w * tmp.get(k, (l + n + i - 2) % n);
            }
            out.set(k, l, acc);
        }
    }
    out
}

/// Shifted Helmholtz operator for the streamfunction inversion.
///
/// The matrix rows carry +1 couplings to the four periodic neighbors and the
/// constant diagonal `-(4 + h^2 kd2 / 2)`, so `A vec(psi) = h^2 * rhs`
/// discretizes `lap(psi) - (kd2/2) psi = rhs`. The matrix is symmetric and,
/// for `kd2 > 0`, strictly diagonally dominant; `-A` is positive definite and
/// is factorized once (sparse LDL^T) at construction.
pub struct HelmholtzOperator {
    grid: GridSpec,
    kd2: f64,
    matrix: CsMat<f64>,
    factor: LdlNumeric<f64, usize>,
}

impl std::fmt::Debug for HelmholtzOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HelmholtzOperator")
            .field("grid", &self.grid)
            .field("kd2", &self.kd2)
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

impl HelmholtzOperator {
    pub fn new(grid: GridSpec, kd2: f64) -> Result<Self> {
        if !(kd2 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "kd2",
                reason: format!("must be > 0 to keep the operator diagonally dominant, got {kd2}"),
            });
        }
        let n = grid.n();
        let m = grid.cells();
        let diag = -(4.0 + grid.h() * grid.h() * kd2 / 2.0);
        let mut tri = TriMat::with_capacity((m, m), 5 * m);
        for k in 0..n {
            let (kp, km) = ((k + 1) % n, (k + n - 1) % n);
            for l in 0..n {
                let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
                let row = grid.index(k, l);
                tri.add_triplet(row, row, diag);
                tri.add_triplet(row, grid.index(kp, l), 1.0);
                tri.add_triplet(row, grid.index(km, l), 1.0);
                tri.add_triplet(row, grid.index(k, lp), 1.0);
                tri.add_triplet(row, grid.index(k, lm), 1.0);
            }
        }
        let matrix: CsMat<f64> = tri.to_csr();
        // Factor -A, which is positive definite; solves negate the RHS.
        let negated = matrix.map(|v| -v);
        let factor = Ldl::new()
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
            .numeric(negated.view())
            .map_err(|e| Error::Solver(format!("LDL factorization failed: {e}")))?;
        Ok(Self {
            grid,
            kd2,
            matrix,
            factor,
        })
    }

    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline]
    pub fn kd2(&self) -> f64 {
        self.kd2
    }

    /// Assembled matrix (for inspection/tests).
    pub fn matrix(&self) -> &CsMat<f64> {
        &self.matrix
    }

    /// Solves `A x = rhs` and checks the residual against `1e-10 * |rhs|`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let neg_rhs: Vec<f64> = rhs.iter().map(|v| -v).collect();
        let x = self.factor.solve(&neg_rhs);
        let mut residual_sq = 0.0;
        let mut rhs_sq = 0.0;
        for (row, vec) in self.matrix.outer_iterator().enumerate() {
            let mut ax = 0.0;
            for (col, &val) in vec.iter() {
                ax += val * x[col];
            }
            let r = rhs[row] - ax;
            residual_sq += r * r;
            rhs_sq += rhs[row] * rhs[row];
        }
        if residual_sq.sqrt() > 1e-10 * rhs_sq.sqrt().max(1e-300) {
            return Err(Error::Solver(format!(
                "solve residual {:.3e} exceeds 1e-10 * |rhs| = {:.3e}",
                residual_sq.sqrt(),
                1e-10 * rhs_sq.sqrt()
            )));
        }
        Ok(x)
    }

    /// Solves for the streamfunction of one layer:
    /// `A vec(psi) = h^2 vec(q - beta*y - (kd2/2) psi_other)`.
    pub fn invert_psi(
        &self,
        q: &ScalarField,
        psi_other: &ScalarField,
        beta: f64,
    ) -> Result<ScalarField> {
        if q.grid().n() != self.grid.n() || psi_other.grid().n() != self.grid.n() {
            return Err(Error::GridMismatch {
                expected: self.grid.n(),
                actual: q.grid().n(),
            });
        }
        let n = self.grid.n();
        let h = self.grid.h();
        let h2 = h * h;
        let half_kd2 = self.kd2 / 2.0;
        let mut rhs = vec![0.0; self.grid.cells()];
        for k in 0..n {
            for l in 0..n {
                let y = l as f64 * h;
                rhs[self.grid.index(k, l)] =
                    h2 * (q.get(k, l) - beta * y - half_kd2 * psi_other.get(k, l));
            }
        }
        let x = self.solve(&rhs)?;
        ScalarField::from_values(self.grid, x)
    }

    /// Eigenvalues of `A` are `2cos(2 pi p/n) + 2cos(2 pi q/n) - 4 - h^2 kd2/2`
    /// on the 2D Fourier modes; the operator is block-circulant, so every
    /// diagonal entry of `A^-1` equals the mode average of `1/lambda` and every
    /// column of `A^-1` has the same squared norm, the mode average of
    /// `1/lambda^2`. Used by the diagonal covariance backend.
    pub fn inverse_diag_entry(&self) -> f64 {
        self.eigenvalue_moment(|lambda| 1.0 / lambda)
    }

    /// Squared column norm of `A^-1` (same for every column); see
    /// [`Self::inverse_diag_entry`].
    pub fn inverse_column_norm_sq(&self) -> f64 {
        self.eigenvalue_moment(|lambda| 1.0 / (lambda * lambda))
    }

    fn eigenvalue_moment(&self, f: impl Fn(f64) -> f64) -> f64 {
        let n = self.grid.n();
        let shift = 4.0 + self.grid.h() * self.grid.h() * self.kd2 / 2.0;
        let mut acc = 0.0;
        for p in 0..n {
            let cp = (2.0 * std::f64::consts::PI * p as f64 / n as f64).cos();
            for q in 0..n {
                let cq = (2.0 * std::f64::consts::PI * q as f64 / n as f64).cos();
                acc += f(2.0 * cp + 2.0 * cq - shift);
            }
        }
        acc / (n * n) as f64
    }
}

/// Shared handle used by the truth solver and the filters, which reuse one
/// factorization per run.
pub type SharedHelmholtz = Arc<HelmholtzOperator>;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    fn random_field(grid: GridSpec, seed: u64) -> ScalarField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ScalarField::from_fn(grid, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn grid_spec_rejects_tiny_grids() {
        assert!(GridSpec::new(3).is_err());
        assert!(GridSpec::new(4).is_ok());
    }

    #[test]
    fn central_diff_of_constant_is_zero() {
        let grid = GridSpec::new(8).unwrap();
        let f = ScalarField::constant(grid, 5.0);
        for axis in [Axis::X, Axis::Y] {
            assert!(central_diff(&f, axis).as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn central_diff_matches_discrete_sine_eigenfunction() {
        // (sin(2pi(k+1)h) - sin(2pi(k-1)h)) / 2h = sin(2pi h)/h * cos(2pi k h)
        let n = 16;
        let grid = GridSpec::new(n).unwrap();
        let h = grid.h();
        let f = ScalarField::from_fn(grid, |k, _| (2.0 * PI * k as f64 * h).sin());
        let out = central_diff(&f, Axis::X);
        let amp = (2.0 * PI * h).sin() / h;
        for k in 0..n {
            for l in 0..n {
                let expected = amp * (2.0 * PI * k as f64 * h).cos();
                assert_relative_eq!(out.get(k, l), expected, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn central_diff_ramp_wrap_columns_carry_the_jump() {
        let n = 8;
        let grid = GridSpec::new(n).unwrap();
        let h = grid.h();
        let f = ScalarField::from_fn(grid, |k, _| k as f64 * h);
        let out = central_diff(&f, Axis::X);
        // Independent oracle: explicit modular-index loop.
        for k in 0..n {
            let kp = (k + 1) % n;
            let km = (k + n - 1) % n;
            let expected = (kp as f64 * h - km as f64 * h) / (2.0 * h);
            for l in 0..n {
                assert_relative_eq!(out.get(k, l), expected, epsilon = 1e-14);
            }
        }
        // Interior columns differentiate the ramp exactly; wrap columns see the jump.
        assert_relative_eq!(out.get(3, 0), 1.0, epsilon = 1e-14);
        assert_relative_eq!(out.get(0, 0), 1.0 - n as f64 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(out.get(n - 1, 0), 1.0 - n as f64 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let grid = GridSpec::new(8).unwrap();
        let f = ScalarField::constant(grid, -2.5);
        assert!(laplacian(&f).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_plane_wave_eigenvalue() {
        let n = 16;
        let grid = GridSpec::new(n).unwrap();
        let h = grid.h();
        let f = ScalarField::from_fn(grid, |k, _| (2.0 * PI * k as f64 * h).cos());
        let out = laplacian(&f);
        let eig = (2.0 * (2.0 * PI * h).cos() - 2.0) / (h * h);
        for (o, v) in out.as_slice().iter().zip(f.as_slice()) {
            assert_relative_eq!(*o, eig * v, max_relative = 1e-11, epsilon = 1e-9);
        }
    }

    #[test]
    fn laplacian_sums_to_zero_on_periodic_grid() {
        let grid = GridSpec::new(10).unwrap();
        let f = random_field(grid, 7);
        let sum: f64 = laplacian(&f).as_slice().iter().sum();
        // telescoping of the periodic stencil; scale by 1/h^2 = n^2
        assert!(sum.abs() <= 1e-10 * (grid.cells() as f64) * (1.0 / grid.h()).powi(2));
    }

    #[test]
    fn jacobian_self_and_constant_vanish() {
        let grid = GridSpec::new(8).unwrap();
        let f = random_field(grid, 3);
        let j = jacobian(&f, &f).unwrap();
        assert!(j.as_slice().iter().all(|&v| v == 0.0));

        let c = ScalarField::constant(grid, 4.0);
        let j = jacobian(&c, &f).unwrap();
        assert!(j.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_of_crossed_sines_matches_closed_form() {
        let n = 16;
        let grid = GridSpec::new(n).unwrap();
        let h = grid.h();
        let psi = ScalarField::from_fn(grid, |k, _| (2.0 * PI * k as f64 * h).sin());
        let q = ScalarField::from_fn(grid, |_, l| (2.0 * PI * l as f64 * h).sin());
        let out = jacobian(&psi, &q).unwrap();
        let amp = ((2.0 * PI * h).sin() / h).powi(2);
        for k in 0..n {
            for l in 0..n {
                let expected = amp
                    * (2.0 * PI * k as f64 * h).cos()
                    * (2.0 * PI * l as f64 * h).cos();
                assert_relative_eq!(out.get(k, l), expected, max_relative = 1e-11, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn jacobian_is_antisymmetric() {
        let grid = GridSpec::new(12).unwrap();
        let f = random_field(grid, 11);
        let g = random_field(grid, 12);
        let fg = jacobian(&f, &g).unwrap();
        let gf = jacobian(&g, &f).unwrap();
        let scale = fg.max_abs().max(1e-30);
        for (a, b) in fg.as_slice().iter().zip(gf.as_slice()) {
            assert!((a + b).abs() <= 1e-14 * scale);
        }
    }

    #[test]
    fn jacobian_rejects_grid_mismatch() {
        let f = ScalarField::zeros(GridSpec::new(8).unwrap());
        let g = ScalarField::zeros(GridSpec::new(10).unwrap());
        assert!(jacobian(&f, &g).is_err());
    }

    #[test]
    fn stencils_are_linear() {
        let grid = GridSpec::new(10).unwrap();
        let f = random_field(grid, 21);
        let g = random_field(grid, 22);
        let (alpha, beta) = (1.7, -0.3);
        let combo = f.scale(alpha).add_scaled(&g, beta).unwrap();

        let lap_combo = laplacian(&combo);
        let lap_lin = laplacian(&f).scale(alpha).add_scaled(&laplacian(&g), beta).unwrap();
        let scale = lap_combo.max_abs().max(1.0);
        for (a, b) in lap_combo.as_slice().iter().zip(lap_lin.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }

        for axis in [Axis::X, Axis::Y] {
            let d_combo = central_diff(&combo, axis);
            let d_lin = central_diff(&f, axis)
                .scale(alpha)
                .add_scaled(&central_diff(&g, axis), beta)
                .unwrap();
            let scale = d_combo.max_abs().max(1.0);
            for (a, b) in d_combo.as_slice().iter().zip(d_lin.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn helmholtz_matrix_entries_at_n4() {
        let grid = GridSpec::new(4).unwrap();
        let op = HelmholtzOperator::new(grid, 10.0).unwrap();
        let mat = op.matrix();
        // diagonal: -(4 + (1/16)*10/2) = -4.3125, four unit off-diagonals per row
        for (row, vec) in mat.outer_iterator().enumerate() {
            let mut off = 0;
            let mut row_sum = 0.0;
            for (col, &val) in vec.iter() {
                row_sum += val;
                if col == row {
                    assert_relative_eq!(val, -4.3125, epsilon = 1e-15);
                } else {
                    assert_relative_eq!(val, 1.0, epsilon = 1e-15);
                    off += 1;
                }
            }
            assert_eq!(off, 4);
            assert_relative_eq!(row_sum, -(grid.h() * grid.h() * 10.0 / 2.0), epsilon = 1e-15);
        }
        // symmetry
        let mt = mat.transpose_view().to_csr();
        for ((v, (i, j)), (w, (ti, tj))) in mat.iter().zip(mt.iter()) {
            assert_eq!((i, j), (ti, tj));
            assert_relative_eq!(*v, *w, epsilon = 0.0);
        }
    }

    #[test]
    fn helmholtz_rejects_nonpositive_kd2() {
        let grid = GridSpec::new(8).unwrap();
        assert!(HelmholtzOperator::new(grid, 0.0).is_err());
        assert!(HelmholtzOperator::new(grid, -1.0).is_err());
    }

    #[test]
    fn invert_psi_zero_rhs_gives_zero() {
        let grid = GridSpec::new(8).unwrap();
        let kd2 = 10.0;
        let beta = 0.1;
        let op = HelmholtzOperator::new(grid, kd2).unwrap();
        let psi_other = random_field(grid, 5);
        // q = beta*y + (kd2/2)*psi_other makes the RHS identically zero
        let q = ScalarField::from_fn(grid, |k, l| {
            beta * l as f64 * grid.h() + kd2 / 2.0 * psi_other.get(k, l)
        });
        let psi = op.invert_psi(&q, &psi_other, beta).unwrap();
        assert!(psi.max_abs() <= 1e-12);
    }

    #[test]
    fn invert_psi_constant_rhs_analytic_solution() {
        // constant RHS C: row sums -h^2 kd2/2 give psi = -2C/kd2
        let kd2 = 10.0;
        let c = 0.7;
        for n in [4, 10, 30] {
            let grid = GridSpec::new(n).unwrap();
            let op = HelmholtzOperator::new(grid, kd2).unwrap();
            let q = ScalarField::from_fn(grid, |_, l| c + 0.1 * l as f64 * grid.h());
            let psi_other = ScalarField::zeros(grid);
            // pick beta so q - beta*y = c exactly
            let psi = op.invert_psi(&q, &psi_other, 0.1).unwrap();
            for &v in psi.as_slice() {
                assert_relative_eq!(v, -2.0 * c / kd2, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn solve_residual_small_on_random_rhs() {
        for n in [4, 10, 30, 50] {
            let grid = GridSpec::new(n).unwrap();
            let op = HelmholtzOperator::new(grid, 10.0).unwrap();
            let rhs: Vec<f64> = random_field(grid, n as u64).as_slice().to_vec();
            // solve() errors if the residual exceeds 1e-10 * |rhs|
            op.solve(&rhs).unwrap();
        }
    }

    #[test]
    fn inverse_diagonals_match_explicit_solves() {
        for n in [4, 8] {
            let grid = GridSpec::new(n).unwrap();
            let op = HelmholtzOperator::new(grid, 10.0).unwrap();
            let m = grid.cells();
            let mut diag_sum = 0.0;
            let mut col_norm_sq = vec![0.0; m];
            for i in 0..m {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                let col = op.solve(&e).unwrap();
                diag_sum += col[i];
                col_norm_sq[i] = col.iter().map(|v| v * v).sum();
            }
            assert_relative_eq!(op.inverse_diag_entry(), diag_sum / m as f64, max_relative = 1e-10);
            for v in col_norm_sq {
                assert_relative_eq!(op.inverse_column_norm_sq(), v, max_relative = 1e-10);
            }
        }
    }
}
