//! Implicit solves of the symmetrized drift-diffusion update
//!
//! ```text
//! lead * rho_new - tau * div( g grad(rho_new / g) ) = source
//! ```
//!
//! for a positive cell mobility `g` (given through `log g`). Writing
//! `rho_new = sqrt(g) * h` turns the left-hand side into a symmetric
//! M-matrix in `h` whose off-diagonals are `-tau/dx^2` and whose diagonal
//! carries the ratios `sqrt(g_nb / g_P)`. The vector `sqrt(g)` is an
//! eigenvector with eigenvalue `lead`, which gives exact discrete mass
//! conservation and lets the solver correct the mass component exactly.
//!
//! Cells with `log g = -inf` are inactive: they carry no flux and their
//! density is pinned to zero. All critical (`m = 1`) steppers use a
//! fully active mobility; the degenerate steppers switch cells off where
//! the density vanishes.
//!
//! Only differences of `log g` enter the operator, so `g` may be shifted by
//! any constant. The solvers shift by the maximum.
//!
//! When `log g` spans hundreds of units the `h` variables span more than the
//! double-precision range and the symmetric residual no longer sees the
//! cells that carry the mass. Every cartesian solve is therefore checked
//! against the residual of the original density equation, and falls back to
//! a Jacobi-preconditioned BiCGSTAB on that equation when the check fails.

use crate::error::{Error, Result};
use crate::grid::{Grid2D, RadialGrid};
use crate::linalg::{
    bicgstab_solve, cg_solve_from, dot, norm2, tridiag_solve, BandMatrix, LinearOperator, SolverSettings,
    TridiagonalSystem,
};

/// Largest admissible jump of `log g`: across one cartesian face, or over
/// the whole radial grid.
pub const LOG_MOBILITY_RANGE_LIMIT: f64 = 1300.0;

/// Spread of `log g` up to which the symmetric `h` formulation is tried.
const SYMMETRIC_RANGE: f64 = 600.0;

/// Largest band storage (in doubles) for the direct last-resort solve.
const BAND_STORAGE_LIMIT: usize = 1 << 24;

fn active_range(log_mobility: &[f64]) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in log_mobility.iter().filter(|l| l.is_finite()) {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (hi >= lo).then_some((lo, hi))
}

/// Validates the data and returns the active range of `log g`, or `None`
/// when no cell is active.
fn check_inputs(log_mobility: &[f64], source: &[f64]) -> Result<Option<(f64, f64)>> {
    if log_mobility.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite("log mobility"));
    }
    if source.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("drift-diffusion source"));
    }
    for (l, s) in log_mobility.iter().zip(source) {
        if !l.is_finite() && *s != 0.0 {
            return Err(Error::param(
                "source",
                "nonzero source on a cell with zero mobility",
            ));
        }
    }
    Ok(active_range(log_mobility))
}

fn check_global_range(lo: f64, hi: f64) -> Result<()> {
    if hi - lo > LOG_MOBILITY_RANGE_LIMIT {
        return Err(Error::MobilityOverflow {
            range: hi - lo,
            max: hi,
            limit: LOG_MOBILITY_RANGE_LIMIT,
        });
    }
    Ok(())
}

fn check_face_jumps(grid: &Grid2D, log_mobility: &[f64], hi: f64) -> Result<()> {
    let mut worst = 0.0f64;
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let lp = log_mobility[grid.idx(i, j)];
            if !lp.is_finite() {
                continue;
            }
            for q in [grid.idx(grid.right(i), j), grid.idx(i, grid.up(j))] {
                let lq = log_mobility[q];
                if lq.is_finite() {
                    worst = worst.max((lq - lp).abs());
                }
            }
        }
    }
    if worst > LOG_MOBILITY_RANGE_LIMIT {
        return Err(Error::MobilityOverflow {
            range: worst,
            max: hi,
            limit: LOG_MOBILITY_RANGE_LIMIT,
        });
    }
    Ok(())
}

/// `source / sqrt(g)` evaluated in log space.
#[inline]
fn scaled_source(src: f64, half_shifted_log: f64) -> f64 {
    if src == 0.0 {
        0.0
    } else {
        src.signum() * (src.abs().ln() - half_shifted_log).exp()
    }
}

/// The symmetric operator `lead*I - tau*S` on a periodic cartesian grid,
/// acting on `h = rho / sqrt(g)`.
#[derive(Debug, Clone)]
pub struct SymmetrizedOperator {
    grid: Grid2D,
    diag: Vec<f64>,
    /// Coupling between `(i, j)` and `(i+1, j)`, stored at `(i, j)`.
    cx: Vec<f64>,
    /// Coupling between `(i, j)` and `(i, j+1)`, stored at `(i, j)`.
    cy: Vec<f64>,
    /// `sqrt(g / g_max)`, zero on inactive cells.
    shape: Vec<f64>,
}

impl SymmetrizedOperator {
    pub fn new(grid: Grid2D, log_mobility: &[f64], lead: f64, tau: f64) -> Result<Self> {
        assert_eq!(log_mobility.len(), grid.len());
        let zeros = vec![0.0; grid.len()];
        let l_max = match check_inputs(log_mobility, &zeros)? {
            Some((lo, hi)) => {
                check_global_range(lo, hi)?;
                hi
            }
            None => 0.0,
        };
        Ok(Self::build(grid, log_mobility, lead, tau, l_max))
    }

    fn build(grid: Grid2D, log_mobility: &[f64], lead: f64, tau: f64, l_max: f64) -> Self {
        let n = grid.len();
        let kx = tau / (grid.dx() * grid.dx());
        let ky = tau / (grid.dy() * grid.dy());
        let mut diag = vec![lead; n];
        let mut cx = vec![0.0; n];
        let mut cy = vec![0.0; n];
        let shape: Vec<f64> = log_mobility
            .iter()
            .map(|&l| if l.is_finite() { (0.5 * (l - l_max)).exp() } else { 0.0 })
            .collect();
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let p = grid.idx(i, j);
                let lp = log_mobility[p];
                if !lp.is_finite() {
                    continue;
                }
                for (q, k, is_x) in [
                    (grid.idx(grid.right(i), j), kx, true),
                    (grid.idx(i, grid.up(j)), ky, false),
                ] {
                    let lq = log_mobility[q];
                    if !lq.is_finite() {
                        continue;
                    }
                    let half = 0.5 * (lq - lp);
                    diag[p] += k * half.exp();
                    diag[q] += k * (-half).exp();
                    if is_x {
                        cx[p] = k;
                    } else {
                        cy[p] = k;
                    }
                }
            }
        }
        Self {
            grid,
            diag,
            cx,
            cy,
            shape,
        }
    }

    pub fn shape(&self) -> &[f64] {
        &self.shape
    }
}

impl LinearOperator for SymmetrizedOperator {
    fn size(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let nx = g.nx();
        for j in 0..g.ny() {
            let row = nx * j;
            let row_up = nx * g.up(j);
            let row_dn = nx * g.down(j);
            for i in 0..nx {
                let p = row + i;
                let ir = g.right(i);
                let il = g.left(i);
                y[p] = self.diag[p] * x[p]
                    - self.cx[p] * x[row + ir]
                    - self.cx[row + il] * x[row + il]
                    - self.cy[p] * x[row_up + i]
                    - self.cy[row_dn + i] * x[row_dn + i];
            }
        }
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diag.clone())
    }
}

/// The same update acting directly on the density: a nonsymmetric
/// M-matrix whose columns sum to `lead`. Only face ratios of `g` appear, so
/// it stays representable for any spread of `log g`.
struct DensityOperator {
    grid: Grid2D,
    diag: Vec<f64>,
    /// Row `(i, j)`, column `(i+1, j)`.
    east: Vec<f64>,
    /// Row `(i+1, j)`, column `(i, j)`.
    west: Vec<f64>,
    /// Row `(i, j)`, column `(i, j+1)`.
    north: Vec<f64>,
    /// Row `(i, j+1)`, column `(i, j)`.
    south: Vec<f64>,
}

impl DensityOperator {
    fn new(grid: Grid2D, log_mobility: &[f64], lead: f64, tau: f64) -> Self {
        let n = grid.len();
        let kx = tau / (grid.dx() * grid.dx());
        let ky = tau / (grid.dy() * grid.dy());
        let mut op = Self {
            grid,
            diag: vec![lead; n],
            east: vec![0.0; n],
            west: vec![0.0; n],
            north: vec![0.0; n],
            south: vec![0.0; n],
        };
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let p = grid.idx(i, j);
                let lp = log_mobility[p];
                if !lp.is_finite() {
                    continue;
                }
                let right = grid.idx(grid.right(i), j);
                let up = grid.idx(i, grid.up(j));
                for (q, k, fwd, bwd) in [
                    (right, kx, &mut op.east, &mut op.west),
                    (up, ky, &mut op.north, &mut op.south),
                ] {
                    let lq = log_mobility[q];
                    if !lq.is_finite() {
                        continue;
                    }
                    let half = 0.5 * (lq - lp);
                    fwd[p] = k * (-half).exp();
                    bwd[p] = k * half.exp();
                }
                op.diag[p] += op.west[p] + op.south[p];
                op.diag[right] += op.east[p];
                op.diag[up] += op.north[p];
            }
        }
        op
    }

    /// Assembles the operator as a band matrix. Rows of the grid are ordered
    /// `0, ny-1, 1, ny-2, ...` so the periodic wrap stays inside a
    /// half-bandwidth of `2 nx`. Returns the matrix and the node permutation.
    fn to_band(&self) -> (BandMatrix, Vec<usize>) {
        let g = &self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let mut rows = Vec::with_capacity(ny);
        let (mut lo, mut hi) = (0, ny - 1);
        while lo <= hi {
            rows.push(lo);
            if lo != hi {
                rows.push(hi);
            }
            lo += 1;
            if hi == 0 {
                break;
            }
            hi -= 1;
        }
        let mut row_pos = vec![0; ny];
        for (k, &j) in rows.iter().enumerate() {
            row_pos[j] = k;
        }
        let perm: Vec<usize> = (0..g.len()).map(|p| row_pos[p / nx] * nx + p % nx).collect();
        let mut band = BandMatrix::zeros(g.len(), 2 * nx);
        for j in 0..ny {
            for i in 0..nx {
                let p = g.idx(i, j);
                let right = g.idx(g.right(i), j);
                let up = g.idx(i, g.up(j));
                band.add(perm[p], perm[p], self.diag[p]);
                band.add(perm[p], perm[right], -self.east[p]);
                band.add(perm[right], perm[p], -self.west[p]);
                band.add(perm[p], perm[up], -self.north[p]);
                band.add(perm[up], perm[p], -self.south[p]);
            }
        }
        (band, perm)
    }

    fn band_solve(&self, source: &[f64]) -> Result<Vec<f64>> {
        let (band, perm) = self.to_band();
        let mut rhs = vec![0.0; source.len()];
        for (p, &s) in source.iter().enumerate() {
            rhs[perm[p]] = s;
        }
        let x = band.solve(&rhs)?;
        Ok(perm.iter().map(|&k| x[k]).collect())
    }

    fn apply_signed(&self, x: &[f64], y: &mut [f64], sign: f64) {
        let g = &self.grid;
        let nx = g.nx();
        for j in 0..g.ny() {
            let row = nx * j;
            let row_up = nx * g.up(j);
            let row_dn = nx * g.down(j);
            for i in 0..nx {
                let p = row + i;
                let il = g.left(i);
                let off = self.east[p] * x[row + g.right(i)]
                    + self.west[row + il] * x[row + il]
                    + self.north[p] * x[row_up + i]
                    + self.south[row_dn + i] * x[row_dn + i];
                y[p] = self.diag[p] * x[p] - sign * off;
            }
        }
    }
}

impl LinearOperator for DensityOperator {
    fn size(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_signed(x, y, 1.0);
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diag.clone())
    }

    fn magnitude(&self, x: &[f64]) -> Option<f64> {
        let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let mut y = vec![0.0; abs.len()];
        self.apply_signed(&abs, &mut y, -1.0);
        Some(norm2(&y))
    }
}

/// Outcome of one cartesian drift-diffusion solve.
#[derive(Debug, Clone)]
pub struct DriftDiffusionSolution {
    pub rho: Vec<f64>,
    pub iterations: usize,
}

/// Symmetric solve in `h = rho / sqrt(g)` followed by the exact mass
/// correction along `sqrt(g)`. `None` when the scaled data is not
/// representable or CG gives up.
fn symmetric_solve(
    grid: Grid2D,
    log_mobility: &[f64],
    source: &[f64],
    lead: f64,
    tau: f64,
    l_max: f64,
    settings: &SolverSettings,
) -> Option<(Vec<f64>, usize)> {
    let n = grid.len();
    let op = SymmetrizedOperator::build(grid, log_mobility, lead, tau, l_max);
    let rhs: Vec<f64> = log_mobility
        .iter()
        .zip(source)
        .map(|(&l, &s)| if l.is_finite() { scaled_source(s, 0.5 * (l - l_max)) } else { 0.0 })
        .collect();
    if !norm2(&rhs).is_finite() {
        return None;
    }
    // x0 = rhs/lead makes the initial residual orthogonal to sqrt(g)
    let x0: Vec<f64> = rhs.iter().map(|v| v / lead).collect();
    let sol = match cg_solve_from(&op, &rhs, x0, settings) {
        Ok(sol) => sol,
        Err(e) => {
            log::debug!("symmetric drift-diffusion solve failed: {e}");
            return None;
        }
    };
    let mut h = sol.x;

    // exact correction along the eigenvector sqrt(g)
    let s = op.shape();
    let ss = dot(s, s);
    if ss > 0.0 {
        let mut ah = vec![0.0; n];
        op.apply(&h, &mut ah);
        let defect: f64 = s.iter().zip(&rhs).zip(&ah).map(|((si, b), a)| si * (b - a)).sum();
        let coef = defect / (lead * ss);
        for (hk, sk) in h.iter_mut().zip(s) {
            *hk += coef * sk;
        }
    }
    let rho: Vec<f64> = h.iter().zip(s).map(|(hk, sk)| hk * sk).collect();
    rho.iter().all(|v| v.is_finite()).then_some((rho, sol.iterations))
}

/// Residual of the density equation if it meets the solver target.
fn density_residual_ok(op: &DensityOperator, rho: &[f64], source: &[f64], settings: &SolverSettings) -> bool {
    let mut r = vec![0.0; rho.len()];
    op.apply(rho, &mut r);
    for (ri, si) in r.iter_mut().zip(source) {
        *ri = si - *ri;
    }
    let src = norm2(source);
    let floor = 16.0 * f64::EPSILON * (rho.len() as f64).sqrt() * (src + op.magnitude(rho).unwrap_or(0.0));
    norm2(&r) <= (settings.tol * src).max(floor)
}

/// Restores the total `sum(source) / lead` by a multiple of `g`, the
/// eigenvector of the density operator.
fn correct_mass(rho: &mut [f64], log_mobility: &[f64], source: &[f64], lead: f64, l_max: f64) {
    let shape: Vec<f64> = log_mobility
        .iter()
        .map(|&l| if l.is_finite() { (l - l_max).exp() } else { 0.0 })
        .collect();
    let total: f64 = shape.iter().sum();
    if total > 0.0 {
        let defect = source.iter().sum::<f64>() / lead - rho.iter().sum::<f64>();
        let coef = defect / total;
        for (r, s) in rho.iter_mut().zip(&shape) {
            *r += coef * s;
        }
    }
}

/// Solves `lead*rho - tau*div(g grad(rho/g)) = source` on a periodic grid.
pub fn solve_cartesian(
    grid: Grid2D,
    log_mobility: &[f64],
    source: &[f64],
    lead: f64,
    tau: f64,
    settings: &SolverSettings,
) -> Result<DriftDiffusionSolution> {
    let n = grid.len();
    assert_eq!(log_mobility.len(), n);
    assert_eq!(source.len(), n);
    settings.validate()?;
    let Some((lo, hi)) = check_inputs(log_mobility, source)? else {
        return Ok(DriftDiffusionSolution {
            rho: vec![0.0; n],
            iterations: 0,
        });
    };
    check_face_jumps(&grid, log_mobility, hi)?;
    let dens = DensityOperator::new(grid, log_mobility, lead, tau);

    let mut iterations = 0;
    let mut start = None;
    if hi - lo <= SYMMETRIC_RANGE {
        if let Some((rho, its)) = symmetric_solve(grid, log_mobility, source, lead, tau, hi, settings) {
            iterations += its;
            if density_residual_ok(&dens, &rho, source, settings) {
                return Ok(DriftDiffusionSolution { rho, iterations });
            }
            start = Some(rho);
        }
    }

    log::debug!("drift-diffusion solve: falling back to the density formulation (log g spread {:.1})", hi - lo);
    let x0 = start.unwrap_or_else(|| source.iter().map(|s| s / lead).collect());
    let fallback = SolverSettings {
        jacobi: true,
        ..*settings
    };
    let mut rho = match bicgstab_solve(&dens, source, x0, &fallback) {
        Ok(sol) => {
            iterations += sol.iterations;
            sol.x
        }
        Err(e) if BandMatrix::storage(n, 2 * grid.nx()) <= BAND_STORAGE_LIMIT => {
            log::debug!("drift-diffusion solve: BiCGSTAB failed ({e}); using the band solver");
            dens.band_solve(source)?
        }
        Err(e) => return Err(e),
    };
    correct_mass(&mut rho, log_mobility, source, lead, hi);
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("drift-diffusion solution"));
    }
    Ok(DriftDiffusionSolution { rho, iterations })
}

/// Radial analogue on the offset grid. Slices have length `nr + 1`; index 0
/// is the ghost and is ignored on input and mirrored on output.
///
/// The face between the ghost and `r_1` sits at the origin and carries no
/// flux; the outer face at `r = L` is zero-flux as well.
pub fn solve_radial(
    grid: &RadialGrid,
    log_mobility: &[f64],
    source: &[f64],
    lead: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let nr = grid.nr();
    assert_eq!(log_mobility.len(), nr + 1);
    assert_eq!(source.len(), nr + 1);
    let (lm, src) = (&log_mobility[1..], &source[1..]);
    let Some((lo, l_max)) = check_inputs(lm, src)? else {
        return Ok(vec![0.0; nr + 1]);
    };
    check_global_range(lo, l_max)?;
    let sys = radial_system(grid, lm, src, lead, tau, l_max);
    let h = tridiag_solve(&sys)?;
    let mut rho = vec![0.0; nr + 1];
    for k in 0..nr {
        let j = k + 1;
        if lm[k].is_finite() {
            rho[j] = h[k] * (0.5 * (lm[k] - l_max)).exp() / grid.r(j).sqrt();
        }
    }
    rho[0] = rho[1];
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("radial drift-diffusion solution"));
    }
    Ok(rho)
}

/// Tridiagonal system in `h_j = sqrt(r_j / g_j) * rho_j` for `j = 1..=nr`.
fn radial_system(
    grid: &RadialGrid,
    lm: &[f64],
    src: &[f64],
    lead: f64,
    tau: f64,
    l_max: f64,
) -> TridiagonalSystem {
    let nr = grid.nr();
    let k = tau / (grid.dr() * grid.dr());
    let mut diag = vec![lead; nr];
    let mut off = vec![0.0; nr - 1];
    for f in 0..nr - 1 {
        let (p, q) = (f, f + 1);
        if !(lm[p].is_finite() && lm[q].is_finite()) {
            continue;
        }
        let (rp, rq) = (grid.r(p + 1), grid.r(q + 1));
        let half = 0.5 * (lm[q] - lm[p]);
        diag[p] += k * (rq / rp).sqrt() * half.exp();
        diag[q] += k * (rp / rq).sqrt() * (-half).exp();
        off[f] = -k;
    }
    let rhs = (0..nr)
        .map(|p| {
            if lm[p].is_finite() {
                grid.r(p + 1).sqrt() * scaled_source(src[p], 0.5 * (lm[p] - l_max))
            } else {
                0.0
            }
        })
        .collect();
    TridiagonalSystem {
        sub: off.clone(),
        diag,
        sup: off,
        rhs,
    }
}
