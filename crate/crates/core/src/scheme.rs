//! Critical (`m = 1`) cartesian steppers.
//!
//! Each step solves for the concentration first and then for the density with
//! mobility `M = exp(c_new)`, in the symmetrized variable `h = rho / sqrt(M)`.

use crate::error::{Error, Result};
use crate::fokker_planck::{self, DriftDiffusionSolution};
use crate::grid::{Field2D, Grid2D};
use crate::linalg::{cg_solve_from, LinearOperator, SolverSettings};

/// Largest spread of `c` accepted in a mobility `exp(c)`.
pub const MOBILITY_EXPONENT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeOrder {
    First,
    Bdf2,
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub order: SchemeOrder,
    pub solver: SolverSettings,
    /// For `epsilon = 0`: subtract the mean of the source so the periodic
    /// Poisson problem is solvable. Without it the source must already have
    /// zero mean.
    pub mass_gauge: bool,
}

impl SchemeConfig {
    pub fn new(epsilon: f64, dt: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            dt,
            order: SchemeOrder::First,
            solver: SolverSettings::default(),
            mass_gauge: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_order(mut self, order: SchemeOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_solver(mut self, solver: SolverSettings) -> Self {
        self.solver = solver;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {}", self.dt)));
        }
        self.solver.validate()
    }
}

/// Per-step solver bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub cg_iterations: usize,
    /// Entries below `-1e-12 * max rho` in the new density.
    pub negatives: usize,
    /// Newton iterations, for the nonlinear steppers.
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub rho: Field2D,
    pub conc: Field2D,
    /// Previous density and concentration, kept for BDF2.
    pub prev: Option<(Field2D, Field2D)>,
    pub time: f64,
    pub step: usize,
    pub stats: StepStats,
}

impl SimState {
    pub fn new(rho: Field2D, conc: Field2D) -> Result<Self> {
        if rho.grid() != conc.grid() {
            return Err(Error::IncompatibleGrids("density and concentration differ".into()));
        }
        if !rho.is_finite() || !conc.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        Ok(Self {
            rho,
            conc,
            prev: None,
            time: 0.0,
            step: 0,
            stats: StepStats::default(),
        })
    }

    pub fn grid(&self) -> &Grid2D {
        self.rho.grid()
    }

    pub(crate) fn advance(&self, rho: Field2D, conc: Field2D, dt: f64, stats: StepStats) -> Self {
        Self {
            prev: Some((self.rho.clone(), self.conc.clone())),
            rho,
            conc,
            time: self.time + dt,
            step: self.step + 1,
            stats,
        }
    }
}

/// `shift * x - scale * Lap_h x` with the periodic five-point Laplacian.
#[derive(Debug, Clone, Copy)]
pub struct ScreenedLaplacian {
    grid: Grid2D,
    shift: f64,
    scale: f64,
}

impl ScreenedLaplacian {
    pub fn new(grid: Grid2D, shift: f64, scale: f64) -> Self {
        Self { grid, shift, scale }
    }
}

impl LinearOperator for ScreenedLaplacian {
    fn size(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let nx = g.nx();
        let kx = self.scale / (g.dx() * g.dx());
        let ky = self.scale / (g.dy() * g.dy());
        let diag = self.shift + 2.0 * kx + 2.0 * ky;
        for j in 0..g.ny() {
            let row = nx * j;
            let up = nx * g.up(j);
            let dn = nx * g.down(j);
            for i in 0..nx {
                let p = row + i;
                y[p] = diag * x[p]
                    - kx * (x[row + g.left(i)] + x[row + g.right(i)])
                    - ky * (x[dn + i] + x[up + i]);
            }
        }
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        let g = &self.grid;
        let d = self.shift + 2.0 * self.scale * (1.0 / (g.dx() * g.dx()) + 1.0 / (g.dy() * g.dy()));
        Some(vec![d; g.len()])
    }
}

/// `-Lap_h x + sigma * mean(x)`: the periodic Laplacian made definite by
/// penalizing the constant mode. On mean-zero data it agrees with `-Lap_h`.
#[derive(Debug, Clone, Copy)]
struct GaugedLaplacian {
    lap: ScreenedLaplacian,
    sigma: f64,
}

impl LinearOperator for GaugedLaplacian {
    fn size(&self) -> usize {
        self.lap.size()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.lap.apply(x, y);
        let shift = self.sigma * x.iter().sum::<f64>() / x.len() as f64;
        y.iter_mut().for_each(|v| *v += shift);
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        self.lap.diagonal()
    }
}

pub(crate) fn check_exponent_range(c: &[f64]) -> Result<()> {
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("concentration"));
    }
    if hi - lo > MOBILITY_EXPONENT_LIMIT {
        return Err(Error::MobilityOverflow {
            range: hi - lo,
            max: hi,
            limit: MOBILITY_EXPONENT_LIMIT,
        });
    }
    Ok(())
}

/// Pointwise `exp(c)`.
pub fn mobility(conc: &Field2D) -> Result<Field2D> {
    if !conc.is_finite() {
        return Err(Error::NonFinite("concentration"));
    }
    let max = conc.max();
    if max > MOBILITY_EXPONENT_LIMIT {
        return Err(Error::MobilityOverflow {
            range: max - conc.min(),
            max,
            limit: MOBILITY_EXPONENT_LIMIT,
        });
    }
    Ok(conc.map(f64::exp))
}

/// Solves `(shift*I - scale*Lap_h) c = rhs`, starting from `guess`.
pub(crate) fn screened_solve(
    grid: Grid2D,
    shift: f64,
    scale: f64,
    rhs: &[f64],
    guess: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<f64>, usize)> {
    let op = ScreenedLaplacian::new(grid, shift, scale);
    let sol = cg_solve_from(&op, rhs, guess.to_vec(), settings)?;
    Ok((sol.x, sol.iterations))
}

/// `-Lap_h c = src - <src>` with `<c> = 0`.
pub(crate) fn gauged_poisson(
    grid: Grid2D,
    src: &[f64],
    guess: &[f64],
    gauge: bool,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, usize)> {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let rhs: Vec<f64> = if gauge {
        src.iter().map(|v| v - mean).collect()
    } else {
        if mean.abs() > 1e-12 * src.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE) {
            return Err(Error::param(
                "mass_gauge",
                "elliptic solve needs a mean-zero source when the gauge is off",
            ));
        }
        src.to_vec()
    };
    let sigma = 2.0 / (grid.dx() * grid.dx()) + 2.0 / (grid.dy() * grid.dy());
    let op = GaugedLaplacian {
        lap: ScreenedLaplacian::new(grid, 0.0, 1.0),
        sigma,
    };
    let sol = cg_solve_from(&op, &rhs, guess.to_vec(), settings)?;
    let mut c = sol.x;
    let cm = c.iter().sum::<f64>() / n;
    c.iter_mut().for_each(|v| *v -= cm);
    Ok((c, sol.iterations))
}

/// `((eps/dt) I - Lap_h) c_new = (eps/dt) c + rho`.
pub fn chemo_update(state: &SimState, config: &SchemeConfig) -> Result<Field2D> {
    chemo_update_counted(state, config).map(|(c, _)| c)
}

fn chemo_update_counted(state: &SimState, config: &SchemeConfig) -> Result<(Field2D, usize)> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Err(Error::param("epsilon", "use the elliptic solve for epsilon = 0"));
    }
    let grid = *state.grid();
    let k = config.epsilon / config.dt;
    let rhs: Vec<f64> = state
        .conc
        .values()
        .iter()
        .zip(state.rho.values())
        .map(|(c, r)| k * c + r)
        .collect();
    let (c, it) = screened_solve(grid, k, 1.0, &rhs, state.conc.values(), &config.solver)?;
    Ok((Field2D::from_values(grid, c)?, it))
}

/// `-Lap_h c = rho - <rho>`, gauged to zero mean.
pub fn elliptic_chemo_solve(rho: &Field2D) -> Result<Field2D> {
    elliptic_chemo_solve_with(rho, &SolverSettings::default())
}

pub fn elliptic_chemo_solve_with(rho: &Field2D, settings: &SolverSettings) -> Result<Field2D> {
    let grid = *rho.grid();
    let guess = vec![0.0; grid.len()];
    let (c, _) = gauged_poisson(grid, rho.values(), &guess, true, settings)?;
    Field2D::from_values(grid, c)
}

pub(crate) fn count_negatives(rho: &[f64]) -> usize {
    let max = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    rho.iter().filter(|&&v| v < -1e-12 * max).count()
}

fn density_solve(
    grid: Grid2D,
    conc_next: &Field2D,
    source: &[f64],
    lead: f64,
    config: &SchemeConfig,
) -> Result<DriftDiffusionSolution> {
    check_exponent_range(conc_next.values())?;
    fokker_planck::solve_cartesian(grid, conc_next.values(), source, lead, config.dt, &config.solver)
}

/// Positivity-preserving density step with `M = exp(conc_next)`.
pub fn density_update(state: &SimState, conc_next: &Field2D, config: &SchemeConfig) -> Result<Field2D> {
    density_update_counted(state, conc_next, config).map(|(r, _)| r)
}

fn density_update_counted(
    state: &SimState,
    conc_next: &Field2D,
    config: &SchemeConfig,
) -> Result<(Field2D, usize)> {
    config.validate()?;
    let grid = *state.grid();
    if conc_next.grid() != &grid {
        return Err(Error::IncompatibleGrids("concentration grid differs from density grid".into()));
    }
    let sol = density_solve(grid, conc_next, state.rho.values(), 1.0, config)?;
    let max = sol.rho.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = config.solver.tol.max(1e-12);
    if let Some((index, &min)) = sol
        .rho
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
    {
        if min < -tol * max {
            return Err(Error::PositivityViolated { min, index, max });
        }
    }
    Ok((Field2D::from_values(grid, sol.rho)?, sol.iterations))
}

pub(crate) fn next_concentration(state: &SimState, config: &SchemeConfig) -> Result<(Field2D, usize)> {
    if config.epsilon > 0.0 {
        chemo_update_counted(state, config)
    } else {
        let grid = *state.grid();
        let (c, it) = gauged_poisson(
            grid,
            state.rho.values(),
            state.conc.values(),
            config.mass_gauge,
            &config.solver,
        )?;
        Ok((Field2D::from_values(grid, c)?, it))
    }
}

/// One step of the first-order symmetrized scheme.
pub fn step_first_order(state: &SimState, config: &SchemeConfig) -> Result<SimState> {
    let (conc, it_c) = next_concentration(state, config)?;
    let (rho, it_r) = density_update_counted(state, &conc, config)?;
    let stats = StepStats {
        cg_iterations: it_c + it_r,
        negatives: count_negatives(rho.values()),
        ..StepStats::default()
    };
    Ok(state.advance(rho, conc, config.dt, stats))
}

/// One step of the BDF2 scheme. Without a previous step the first-order
/// scheme is used.
pub fn step_bdf2(state: &SimState, config: &SchemeConfig) -> Result<SimState> {
    let Some((rho_prev, conc_prev)) = &state.prev else {
        return step_first_order(state, config);
    };
    config.validate()?;
    let grid = *state.grid();
    let (eps, dt) = (config.epsilon, config.dt);
    let rho = state.rho.values();
    let rp = rho_prev.values();
    let extrapolated: Vec<f64> = rho.iter().zip(rp).map(|(a, b)| 2.0 * a - b).collect();

    let (conc, it_c) = if eps > 0.0 {
        let rhs: Vec<f64> = state
            .conc
            .values()
            .iter()
            .zip(conc_prev.values())
            .zip(&extrapolated)
            .map(|((c, cp), s)| (eps / dt) * (2.0 * c - 0.5 * cp) + s)
            .collect();
        screened_solve(grid, 1.5 * eps / dt, 1.0, &rhs, state.conc.values(), &config.solver)?
    } else {
        gauged_poisson(grid, &extrapolated, state.conc.values(), config.mass_gauge, &config.solver)?
    };
    let conc = Field2D::from_values(grid, conc)?;

    let source: Vec<f64> = rho.iter().zip(rp).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let sol = density_solve(grid, &conc, &source, 1.5, config)?;
    let negatives = count_negatives(&sol.rho);
    if negatives > 0 {
        log::debug!("bdf2 step {} produced {negatives} negative densities", state.step + 1);
    }
    let stats = StepStats {
        cg_iterations: it_c + sol.iterations,
        negatives,
        ..StepStats::default()
    };
    Ok(state.advance(Field2D::from_values(grid, sol.rho)?, conc, dt, stats))
}

/// Dispatches on `config.order`.
pub fn step(state: &SimState, config: &SchemeConfig) -> Result<SimState> {
    match config.order {
        SchemeOrder::First => step_first_order(state, config),
        SchemeOrder::Bdf2 => step_bdf2(state, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm2};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> SolverSettings {
        SolverSettings::with_tol(1e-13)
    }

    fn dense_of(op: &dyn LinearOperator) -> DMatrix<f64> {
        let n = op.size();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for k in 0..n {
            e[k] = 1.0;
            op.apply(&e, &mut col);
            e[k] = 0.0;
            for r in 0..n {
                m[(r, k)] = col[r];
            }
        }
        m
    }

    /// Dense five-point Laplacian assembled entry by entry.
    fn dense_laplacian(g: &Grid2D) -> DMatrix<f64> {
        let n = g.len();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let p = g.idx(i, j);
                let ax = 1.0 / (g.dx() * g.dx());
                let ay = 1.0 / (g.dy() * g.dy());
                l[(p, p)] -= 2.0 * ax + 2.0 * ay;
                l[(p, g.idx(g.left(i), j))] += ax;
                l[(p, g.idx(g.right(i), j))] += ax;
                l[(p, g.idx(i, g.down(j)))] += ay;
                l[(p, g.idx(i, g.up(j)))] += ay;
            }
        }
        l
    }

    /// Dense `I - dt*div(sqrt(M_P M_Q) grad(rho/M))` acting on rho.
    fn dense_density_operator(g: &Grid2D, m: &[f64], dt: f64, lead: f64) -> DMatrix<f64> {
        let n = g.len();
        let mut a = DMatrix::identity(n, n) * lead;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let p = g.idx(i, j);
                for (q, h) in [
                    (g.idx(g.left(i), j), g.dx()),
                    (g.idx(g.right(i), j), g.dx()),
                    (g.idx(i, g.down(j)), g.dy()),
                    (g.idx(i, g.up(j)), g.dy()),
                ] {
                    let w = dt * (m[p] * m[q]).sqrt() / (h * h);
                    a[(p, q)] -= w / m[q];
                    a[(p, p)] += w / m[p];
                }
            }
        }
        a
    }

    fn random_field(g: Grid2D, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field2D {
        let v = (0..g.len()).map(|_| rng.gen_range(lo..hi)).collect();
        Field2D::from_values(g, v).unwrap()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm2(&d) / norm2(b).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn mobility_values() {
        let g = Grid2D::square(0.0, 1.0, 4).unwrap();
        assert!(mobility(&Field2D::zeros(g)).unwrap().values().iter().all(|&v| v == 1.0));
        let two = mobility(&Field2D::constant(g, 2f64.ln())).unwrap();
        assert!(two.values().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let peak = Field2D::from_fn(g, |x, y| (-(x * x + y * y)).exp());
        let m = mobility(&peak).unwrap();
        for (a, c) in m.values().iter().zip(peak.values()) {
            assert!((a - c.exp()).abs() <= f64::EPSILON * a);
        }
        assert!(matches!(
            mobility(&Field2D::constant(g, 800.0)),
            Err(Error::MobilityOverflow { .. })
        ));
    }

    #[test]
    fn chemo_update_trivial_cases() {
        let g = Grid2D::square(0.0, 1.0, 6).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.1).unwrap();
        let s = SimState::new(Field2D::zeros(g), Field2D::zeros(g)).unwrap();
        assert!(chemo_update(&s, &cfg).unwrap().values().iter().all(|&v| v == 0.0));
        let s = SimState::new(Field2D::constant(g, 3.0), Field2D::constant(g, 0.5)).unwrap();
        let cfg = SchemeConfig::new(2.0, 0.1).unwrap();
        for v in chemo_update(&s, &cfg).unwrap().values() {
            assert!((v - (0.5 + 0.05 * 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn chemo_update_matches_dense() {
        let g = Grid2D::square(0.0, 1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = random_field(g, &mut rng, 0.0, 2.0);
        let conc = random_field(g, &mut rng, -1.0, 1.0);
        let s = SimState::new(rho.clone(), conc.clone()).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.1).unwrap().with_solver(tight());
        let c = chemo_update(&s, &cfg).unwrap();
        let a = DMatrix::identity(g.len(), g.len()) * 10.0 - dense_laplacian(&g);
        let b = DVector::from_iterator(
            g.len(),
            conc.values().iter().zip(rho.values()).map(|(c, r)| 10.0 * c + r),
        );
        let x = a.lu().solve(&b).unwrap();
        assert!(rel_diff(c.values(), x.as_slice()) < 1e-10);
    }

    #[test]
    fn elliptic_solve_cases() {
        let g = Grid2D::square(0.0, 1.0, 8).unwrap();
        let c = elliptic_chemo_solve(&Field2D::constant(g, 4.0)).unwrap();
        assert!(c.values().iter().all(|v| v.abs() < 1e-14));

        // single discrete Fourier mode
        let k = 2.0 * std::f64::consts::PI;
        let rho = Field2D::from_fn(g, |x, _| (k * x).sin());
        let lam = 4.0 / (g.dx() * g.dx()) * (k * g.dx() / 2.0).sin().powi(2);
        let c = elliptic_chemo_solve_with(&rho, &tight()).unwrap();
        for (cv, rv) in c.values().iter().zip(rho.values()) {
            assert!((cv - rv / lam).abs() < 1e-11);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = random_field(g, &mut rng, 0.0, 1.0);
        let c = elliptic_chemo_solve_with(&rho, &tight()).unwrap();
        assert!(c.mean().abs() < 1e-14);
        // dense oracle on the gauged system: append the mean constraint
        let n = g.len();
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&(-dense_laplacian(&g)));
        for p in 0..n {
            a[(p, n)] = 1.0;
            a[(n, p)] = 1.0;
        }
        let mean = rho.mean();
        let mut b = DVector::zeros(n + 1);
        for p in 0..n {
            b[p] = rho.values()[p] - mean;
        }
        let x = a.lu().solve(&b).unwrap();
        assert!(rel_diff(c.values(), &x.as_slice()[..n]) < 1e-10);
    }

    #[test]
    fn density_update_uniform_is_fixed_point() {
        let g = Grid2D::square(-1.0, 1.0, 6).unwrap();
        let s = SimState::new(Field2D::constant(g, 2.5), Field2D::zeros(g)).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.3).unwrap();
        let r = density_update(&s, &Field2D::constant(g, 1.7), &cfg).unwrap();
        assert!(r.values().iter().all(|v| (v - 2.5).abs() < 1e-13));
    }

    #[test]
    fn density_impulse_matches_heat_step() {
        let g = Grid2D::square(0.0, 3.0, 3).unwrap();
        let mut rho = Field2D::zeros(g);
        rho.set(1, 1, 1.0);
        let dt = g.dx() * g.dx();
        let s = SimState::new(rho.clone(), Field2D::zeros(g)).unwrap();
        let cfg = SchemeConfig::new(1.0, dt).unwrap().with_solver(tight());
        let r = density_update(&s, &Field2D::zeros(g), &cfg).unwrap();
        let a = DMatrix::identity(9, 9) - dense_laplacian(&g) * dt;
        let x = a.lu().solve(&DVector::from_column_slice(rho.values())).unwrap();
        assert!(rel_diff(r.values(), x.as_slice()) < 1e-10);
    }

    #[test]
    fn density_update_matches_dense_with_random_mobility() {
        let g = Grid2D::new(0.0, 1.0, 0.0, 1.4, 8, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rho = random_field(g, &mut rng, 0.0, 3.0);
        let conc = random_field(g, &mut rng, -2.0, 2.0);
        let s = SimState::new(rho.clone(), Field2D::zeros(g)).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.05).unwrap().with_solver(tight());
        let r = density_update(&s, &conc, &cfg).unwrap();
        let m: Vec<f64> = conc.values().iter().map(|c| c.exp()).collect();
        let a = dense_density_operator(&g, &m, 0.05, 1.0);
        let x = a.lu().solve(&DVector::from_column_slice(rho.values())).unwrap();
        assert!(rel_diff(r.values(), x.as_slice()) < 1e-10);
        assert!((r.sum() - rho.sum()).abs() < 1e-12 * rho.sum());
    }

    #[test]
    fn symmetric_form_equals_flux_form() {
        // sqrt(M) (lead I - dt S) (rho / sqrt(M)) == lead rho - dt div(sqrt(M_P M_Q) grad(rho/M))
        let g = Grid2D::new(0.0, 2.0, 0.0, 1.0, 6, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let rho: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cmax = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let op = fokker_planck::SymmetrizedOperator::new(g, &c, 1.0, 0.2).unwrap();
        let s = op.shape();
        let h: Vec<f64> = rho.iter().zip(s).map(|(r, s)| r / s).collect();
        let mut ah = vec![0.0; g.len()];
        op.apply(&h, &mut ah);
        let lhs: Vec<f64> = ah.iter().zip(s).map(|(a, s)| a * s).collect();
        let m: Vec<f64> = c.iter().map(|v| (v - cmax).exp()).collect();
        let rhs = dense_density_operator(&g, &m, 0.2, 1.0) * DVector::from_column_slice(&rho);
        assert!(rel_diff(&lhs, rhs.as_slice()) < 1e-12);
    }

    #[test]
    fn screened_laplacian_is_symmetric() {
        let g = Grid2D::new(0.0, 1.0, 0.0, 3.0, 5, 6).unwrap();
        let op = ScreenedLaplacian::new(g, 0.3, 1.2);
        let a = dense_of(&op);
        assert!((a.clone() - a.transpose()).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut au = vec![0.0; g.len()];
        op.apply(&u, &mut au);
        assert!(dot(&u, &au) > 0.0);
    }

    #[test]
    fn step_trivial_cases() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.1).unwrap();
        let s = SimState::new(Field2D::zeros(g), Field2D::zeros(g)).unwrap();
        let n = step_first_order(&s, &cfg).unwrap();
        assert!(n.rho.values().iter().all(|&v| v == 0.0));
        assert!(n.conc.values().iter().all(|&v| v == 0.0));
        assert_eq!(n.step, 1);

        let s = SimState::new(Field2D::constant(g, 2.0), Field2D::constant(g, 1.0)).unwrap();
        let n = step_first_order(&s, &cfg).unwrap();
        assert!(n.rho.values().iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(n.conc.values().iter().all(|v| (v - 1.2).abs() < 1e-12));
    }

    #[test]
    fn gaussian_mass_conserved_over_steps() {
        let g = Grid2D::square(-5.0, 5.0, 20).unwrap();
        let rho = Field2D::from_fn(g, |x, y| 4.0 * (-(x * x + y * y)).exp());
        let conc = Field2D::from_fn(g, |x, y| (-(x * x + y * y) / 2.0).exp());
        let mut s = SimState::new(rho, conc).unwrap();
        let m0 = s.rho.sum();
        for order in [SchemeOrder::First, SchemeOrder::Bdf2] {
            let cfg = SchemeConfig::new(1e-2, 0.5).unwrap().with_order(order);
            for _ in 0..5 {
                s = step(&s, &cfg).unwrap();
                assert!((s.rho.sum() - m0).abs() <= 1e-10 * m0);
            }
        }
    }

    #[test]
    fn bdf2_preserves_uniform_state() {
        let g = Grid2D::square(0.0, 1.0, 6).unwrap();
        let cfg = SchemeConfig::new(0.0, 0.2).unwrap().with_order(SchemeOrder::Bdf2);
        let mut s = SimState::new(Field2D::constant(g, 1.5), Field2D::zeros(g)).unwrap();
        for _ in 0..4 {
            s = step(&s, &cfg).unwrap();
        }
        assert!(s.rho.values().iter().all(|v| (v - 1.5).abs() < 1e-13));
        assert!(s.conc.values().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn bdf2_closer_to_refined_reference() {
        let g = Grid2D::square(-5.0, 5.0, 16).unwrap();
        let init = || {
            SimState::new(
                Field2D::from_fn(g, |x, y| 4.0 * (-(x * x + y * y)).exp()),
                Field2D::from_fn(g, |x, y| (-(x * x + y * y) / 2.0).exp()),
            )
            .unwrap()
        };
        let run = |order, dt: f64, steps: usize| {
            let cfg = SchemeConfig::new(1.0, dt).unwrap().with_order(order).with_solver(tight());
            let mut s = init();
            for _ in 0..steps {
                s = step(&s, &cfg).unwrap();
            }
            s.rho
        };
        let reference = run(SchemeOrder::Bdf2, 0.0125, 80);
        let first = run(SchemeOrder::First, 0.1, 10);
        let second = run(SchemeOrder::Bdf2, 0.1, 10);
        let err = |f: &Field2D| rel_diff(f.values(), reference.values());
        assert!(err(&second) < err(&first));
    }

    #[test]
    fn elliptic_without_gauge_rejects_mass() {
        let g = Grid2D::square(0.0, 1.0, 4).unwrap();
        let mut cfg = SchemeConfig::new(0.0, 0.1).unwrap();
        cfg.mass_gauge = false;
        let s = SimState::new(Field2D::constant(g, 1.0), Field2D::zeros(g)).unwrap();
        assert!(step_first_order(&s, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SchemeConfig::new(-1.0, 0.1).is_err());
        assert!(SchemeConfig::new(1.0, 0.0).is_err());
        assert!(SchemeConfig::new(0.0, 1.0).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn first_order_step_conserves_mass_and_sign(
                seed in 0u64..10_000,
                eps in prop_oneof![Just(0.0), 1e-3..1.0f64],
                dt in 1e-3..10.0f64,
            ) {
                let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rho = random_field(g, &mut rng, 0.0, 5.0);
                let conc = random_field(g, &mut rng, -3.0, 3.0);
                let s = SimState::new(rho, conc).unwrap();
                let cfg = SchemeConfig::new(eps, dt).unwrap().with_solver(SolverSettings::with_tol(1e-13));
                let n = step_first_order(&s, &cfg).unwrap();
                let m0 = s.rho.sum();
                prop_assert!((n.rho.sum() - m0).abs() <= 1e-12 * m0);
                prop_assert!(n.rho.min() >= -1e-12 * n.rho.max());
            }

            #[test]
            fn assembled_operator_is_symmetric(seed in 0u64..10_000) {
                let g = Grid2D::square(0.0, 1.0, 7).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let lm: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let op = fokker_planck::SymmetrizedOperator::new(g, &lm, 1.0, 0.7).unwrap();
                let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (mut au, mut av) = (vec![0.0; g.len()], vec![0.0; g.len()]);
                op.apply(&u, &mut au);
                op.apply(&v, &mut av);
                let scale = norm2(&au) * norm2(&v) + norm2(&u) * norm2(&av);
                prop_assert!((dot(&au, &v) - dot(&u, &av)).abs() <= 1e-12 * scale);
            }
        }
    }
}
