//! Cartesian steppers for degenerate diffusion `Lap rho^m`, `m > 1`.
//!
//! The semi-implicit stepper lags the mobility `rho^n M^n`, with
//! `M = exp(c - m/(m-1) rho^(m-1))`, and is positivity preserving. The Newton
//! stepper solves the fully implicit conservative scheme and is not.

use crate::error::{Error, Result};
use crate::fokker_planck;
use crate::grid::{Field2D, Grid2D};
use crate::linalg::{bicgstab_solve, LinearOperator, SolverSettings};
use crate::radial::degenerate_log_mobility;
use crate::scheme::{count_negatives, next_concentration, SchemeConfig, SimState, StepStats, MOBILITY_EXPONENT_LIMIT};

#[derive(Debug, Clone)]
pub struct DegenerateConfig {
    pub m: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Lower bound for the Newton starting iterate.
    pub mobility_floor: f64,
    /// Settings for the Jacobian solves.
    pub linear: SolverSettings,
}

impl DegenerateConfig {
    pub fn new(m: f64) -> Result<Self> {
        let cfg = Self {
            m,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            mobility_floor: 0.0,
            linear: SolverSettings::with_tol(1e-12),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 1.0 && self.m.is_finite()) {
            return Err(Error::param("m", format!("must be > 1, got {}", self.m)));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::param("newton_tol", "must be positive"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::param("newton_max_iter", "must be at least 1"));
        }
        if !(self.mobility_floor >= 0.0) {
            return Err(Error::param("mobility_floor", "must be >= 0"));
        }
        self.linear.validate()
    }
}

/// Largest step for which the lagged-mobility update does not amplify grid
/// modes about a constant state of height `rho_max`: `h^2 / (2 d (m rho^(m-1) - 2))`
/// in `d` space dimensions. Infinite when the bracket is not positive.
pub fn semi_implicit_dt_bound(m: f64, rho_max: f64, h: f64, dims: usize) -> f64 {
    let excess = m * rho_max.powf(m - 1.0) - 2.0;
    if excess <= 0.0 {
        return f64::INFINITY;
    }
    h * h / (2.0 * dims as f64 * excess)
}

/// Pointwise `exp(c - m/(m-1) rho^(m-1))`.
pub fn degenerate_mobility(rho: &Field2D, conc: &Field2D, m: f64) -> Result<Field2D> {
    if !(m > 1.0) {
        return Err(Error::param("m", format!("must be > 1, got {m}")));
    }
    if rho.grid() != conc.grid() {
        return Err(Error::IncompatibleGrids("density and concentration differ".into()));
    }
    let k = m / (m - 1.0);
    let exponent: Vec<f64> = rho
        .values()
        .iter()
        .zip(conc.values())
        .map(|(&r, &c)| c - k * r.max(0.0).powf(m - 1.0))
        .collect();
    let max = exponent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || exponent.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("degenerate mobility exponent"));
    }
    if max > MOBILITY_EXPONENT_LIMIT {
        let min = exponent.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::MobilityOverflow {
            range: max - min,
            max,
            limit: MOBILITY_EXPONENT_LIMIT,
        });
    }
    Field2D::from_values(*rho.grid(), exponent.into_iter().map(f64::exp).collect())
}

fn require_nonnegative(rho: &Field2D) -> Result<()> {
    if let Some(&neg) = rho.values().iter().find(|&&v| v < 0.0) {
        return Err(Error::param("rho", format!("degenerate step needs rho >= 0, found {neg:e}")));
    }
    Ok(())
}

/// Semi-implicit step: the density is solved with the lagged mobility
/// `rho^n M^n` on the support of `rho^n`; cells outside it stay zero.
pub fn step_subcritical_semi_implicit(
    state: &SimState,
    scheme: &SchemeConfig,
    config: &DegenerateConfig,
) -> Result<SimState> {
    config.validate()?;
    scheme.validate()?;
    require_nonnegative(&state.rho)?;
    let grid = *state.grid();
    let (conc, it_c) = next_concentration(state, scheme)?;
    let lm: Vec<f64> = state
        .rho
        .values()
        .iter()
        .zip(state.conc.values())
        .map(|(&r, &c)| degenerate_log_mobility(r, c, config.m))
        .collect();
    let mut sol = fokker_planck::solve_cartesian(grid, &lm, state.rho.values(), 1.0, scheme.dt, &scheme.solver)?;
    let max = sol.rho.iter().fold(0.0f64, |m, v| m.max(*v));
    if let Some((index, &min)) = sol.rho.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        if min < -scheme.solver.tol.max(1e-12) * max {
            return Err(Error::PositivityViolated { min, index, max });
        }
    }
    let negatives = count_negatives(&sol.rho);
    clip_rounding_negatives(&mut sol.rho);
    let stats = StepStats {
        cg_iterations: it_c + sol.iterations,
        negatives,
        ..StepStats::default()
    };
    Ok(state.advance(Field2D::from_values(grid, sol.rho)?, conc, scheme.dt, stats))
}

/// Zeroes solver-rounding negatives (the next step takes `log rho`) and
/// rescales the positive part so the total is unchanged.
fn clip_rounding_negatives(rho: &mut [f64]) {
    if rho.iter().all(|&v| v >= 0.0) {
        return;
    }
    let total: f64 = rho.iter().sum();
    let kept: f64 = rho.iter().filter(|&&v| v > 0.0).sum();
    let scale = if kept > 0.0 { total / kept } else { 1.0 };
    for v in rho.iter_mut() {
        *v = if *v > 0.0 { *v * scale } else { 0.0 };
    }
}

/// The implicit residual
/// `F(rho) = rho - rho_old - dt (Lap_h max(rho,0)^m - div_h(rho_face grad_h c))`
/// with centered face densities.
struct ImplicitSystem<'a> {
    grid: Grid2D,
    rho_old: &'a [f64],
    conc: &'a [f64],
    m: f64,
    dt: f64,
}

impl ImplicitSystem<'_> {
    fn residual(&self, rho: &[f64], out: &mut [f64]) -> bool {
        let g = &self.grid;
        let nx = g.nx();
        let (ax, ay) = (1.0 / (g.dx() * g.dx()), 1.0 / (g.dy() * g.dy()));
        let mut clamped = false;
        let pressure: Vec<f64> = rho
            .iter()
            .map(|&r| {
                if r < 0.0 {
                    clamped = true;
                }
                r.max(0.0).powf(self.m)
            })
            .collect();
        let c = self.conc;
        for j in 0..g.ny() {
            for i in 0..nx {
                let p = g.idx(i, j);
                let mut div = 0.0;
                for (q, a) in [
                    (g.idx(g.left(i), j), ax),
                    (g.idx(g.right(i), j), ax),
                    (g.idx(i, g.down(j)), ay),
                    (g.idx(i, g.up(j)), ay),
                ] {
                    // flux into p across the face shared with q
                    div += a * ((pressure[q] - pressure[p]) - 0.5 * (rho[p] + rho[q]) * (c[q] - c[p]));
                }
                out[p] = rho[p] - self.rho_old[p] - self.dt * div;
            }
        }
        clamped
    }
}

/// Jacobian of the implicit residual at a fixed iterate.
struct Jacobian<'a> {
    grid: Grid2D,
    /// `m max(rho,0)^(m-1)`
    slope: Vec<f64>,
    conc: &'a [f64],
    dt: f64,
}

impl LinearOperator for Jacobian<'_> {
    fn size(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, v: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let (ax, ay) = (1.0 / (g.dx() * g.dx()), 1.0 / (g.dy() * g.dy()));
        let c = self.conc;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let p = g.idx(i, j);
                let mut div = 0.0;
                for (q, a) in [
                    (g.idx(g.left(i), j), ax),
                    (g.idx(g.right(i), j), ax),
                    (g.idx(i, g.down(j)), ay),
                    (g.idx(i, g.up(j)), ay),
                ] {
                    div += a * ((self.slope[q] * v[q] - self.slope[p] * v[p]) - 0.5 * (v[p] + v[q]) * (c[q] - c[p]));
                }
                y[p] = v[p] - self.dt * div;
            }
        }
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        let g = &self.grid;
        let (ax, ay) = (1.0 / (g.dx() * g.dx()), 1.0 / (g.dy() * g.dy()));
        let c = self.conc;
        let mut d = vec![0.0; g.len()];
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let p = g.idx(i, j);
                let mut s = 0.0;
                for (q, a) in [
                    (g.idx(g.left(i), j), ax),
                    (g.idx(g.right(i), j), ax),
                    (g.idx(i, g.down(j)), ay),
                    (g.idx(i, g.up(j)), ay),
                ] {
                    s += a * (self.slope[p] + 0.5 * (c[q] - c[p]));
                }
                d[p] = 1.0 + self.dt * s;
            }
        }
        Some(d)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Fully implicit step solved by damped Newton. The Newton correction is
/// adjusted along the constant mode so that the discrete mass is exact.
pub fn step_subcritical_newton(
    state: &SimState,
    scheme: &SchemeConfig,
    config: &DegenerateConfig,
) -> Result<SimState> {
    config.validate()?;
    scheme.validate()?;
    let grid = *state.grid();
    let n = grid.len();
    let (conc, it_c) = next_concentration(state, scheme)?;
    let sys = ImplicitSystem {
        grid,
        rho_old: state.rho.values(),
        conc: conc.values(),
        m: config.m,
        dt: scheme.dt,
    };

    let mut rho: Vec<f64> = state.rho.values().iter().map(|&r| r.max(config.mobility_floor)).collect();
    let mut f = vec![0.0; n];
    let mut clamped = sys.residual(&rho, &mut f);
    let mut norm = max_abs(&f);
    let mut history = vec![norm];
    let mut linear_iterations = 0;
    let mut iterations = 0;
    let mass_target: f64 = state.rho.values().iter().sum();

    while norm > config.newton_tol {
        if iterations == config.newton_max_iter {
            return Err(Error::NewtonFailed { history });
        }
        iterations += 1;
        let jac = Jacobian {
            grid,
            slope: rho.iter().map(|&r| config.m * r.max(0.0).powf(config.m - 1.0)).collect(),
            conc: conc.values(),
            dt: scheme.dt,
        };
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let sol = bicgstab_solve(&jac, &rhs, vec![0.0; n], &config.linear)?;
        linear_iterations += sol.iterations;
        let mut delta = sol.x;
        // the Jacobian preserves sums, so sum(delta) should equal -sum(F)
        let shift = (mass_target - rho.iter().sum::<f64>() - delta.iter().sum::<f64>()) / n as f64;
        delta.iter_mut().for_each(|d| *d += shift);

        let mut lambda = 1.0;
        let mut trial = vec![0.0; n];
        let mut f_trial = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..=30 {
            for k in 0..n {
                trial[k] = rho[k] + lambda * delta[k];
            }
            let c = sys.residual(&trial, &mut f_trial);
            let trial_norm = max_abs(&f_trial);
            if trial_norm < norm || trial_norm <= config.newton_tol {
                clamped |= c;
                std::mem::swap(&mut rho, &mut trial);
                std::mem::swap(&mut f, &mut f_trial);
                norm = trial_norm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        history.push(norm);
        if !accepted || !norm.is_finite() {
            return Err(Error::NewtonFailed { history });
        }
    }
    if clamped {
        log::debug!("newton step {}: negative iterate clamped in rho^m", state.step + 1);
    }
    let negatives = count_negatives(&rho);
    if negatives > 0 {
        log::warn!("newton step {} produced {negatives} negative densities", state.step + 1);
    }
    let stats = StepStats {
        cg_iterations: it_c + linear_iterations,
        negatives,
        newton_iterations: iterations,
    };
    Ok(state.advance(Field2D::from_values(grid, rho)?, conc, scheme.dt, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump(g: Grid2D) -> Field2D {
        Field2D::from_fn(g, |x, y| (1.0 - 4.0 * (x * x + y * y)).max(0.0))
    }

    #[test]
    fn mobility_examples() {
        let g = Grid2D::square(0.0, 1.0, 4).unwrap();
        let m = degenerate_mobility(&Field2D::constant(g, 1.0), &Field2D::zeros(g), 2.0).unwrap();
        assert!(m.values().iter().all(|v| (v - (-2f64).exp()).abs() < 1e-15));
        let c = Field2D::from_fn(g, |x, y| x - y);
        let m = degenerate_mobility(&Field2D::zeros(g), &c, 5.0).unwrap();
        for (a, b) in m.values().iter().zip(c.values()) {
            assert_eq!(*a, b.exp());
        }
        let m = degenerate_mobility(&Field2D::constant(g, 4.0), &Field2D::constant(g, 1.0), 1.5).unwrap();
        assert!(m.values().iter().all(|v| (v - (-5f64).exp()).abs() < 1e-15));
        assert!(degenerate_mobility(&Field2D::zeros(g), &Field2D::zeros(g), 1.0).is_err());
    }

    #[test]
    fn semi_implicit_uniform_is_fixed_point() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let s = SimState::new(Field2D::constant(g, 0.7), Field2D::constant(g, 0.35)).unwrap();
        let scheme = SchemeConfig::new(0.0, 0.01).unwrap();
        let n = step_subcritical_semi_implicit(&s, &scheme, &DegenerateConfig::new(4.0).unwrap()).unwrap();
        assert!(n.rho.values().iter().all(|v| (v - 0.7).abs() < 1e-13));
    }

    #[test]
    fn semi_implicit_keeps_outside_of_support_zero() {
        let g = Grid2D::square(-1.0, 1.0, 16).unwrap();
        let rho = bump(g);
        let s = SimState::new(rho.clone(), rho.map(|v| 0.5 * v)).unwrap();
        let scheme = SchemeConfig::new(0.0, 0.05).unwrap();
        let n = step_subcritical_semi_implicit(&s, &scheme, &DegenerateConfig::new(3.0).unwrap()).unwrap();
        for (a, b) in rho.values().iter().zip(n.rho.values()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            }
        }
        assert!((n.rho.sum() - rho.sum()).abs() < 1e-12 * rho.sum());
    }

    #[test]
    fn semi_implicit_matches_dense_on_support() {
        let g = Grid2D::square(0.0, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rho: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..1.5)).collect();
        rho[5] = 0.0;
        rho[10] = 0.0;
        let conc: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = 2.5;
        let dt = 0.02;
        let s = SimState::new(
            Field2D::from_values(g, rho.clone()).unwrap(),
            Field2D::from_values(g, conc.clone()).unwrap(),
        )
        .unwrap();
        let scheme = SchemeConfig::new(1.0, dt).unwrap().with_solver(SolverSettings::with_tol(1e-14));
        let n = step_subcritical_semi_implicit(&s, &scheme, &DegenerateConfig::new(m).unwrap()).unwrap();

        // dense flux-form oracle on the support
        let gm: Vec<f64> = rho
            .iter()
            .zip(&conc)
            .map(|(&r, &c)| if r > 0.0 { r * (c - m / (m - 1.0) * r.powf(m - 1.0)).exp() } else { 0.0 })
            .collect();
        let support: Vec<usize> = (0..16).filter(|&k| rho[k] > 0.0).collect();
        let pos = |k: usize| support.iter().position(|&s| s == k);
        let ns = support.len();
        let mut a = DMatrix::identity(ns, ns);
        let h2 = g.dx() * g.dx();
        for (row, &p) in support.iter().enumerate() {
            let (i, j) = (p % 4, p / 4);
            for q in [g.idx(g.left(i), j), g.idx(g.right(i), j), g.idx(i, g.down(j)), g.idx(i, g.up(j))] {
                let Some(col) = pos(q) else { continue };
                let w = dt * (gm[p] * gm[q]).sqrt() / h2;
                a[(row, col)] -= w / gm[q];
                a[(row, row)] += w / gm[p];
            }
        }
        let b = DVector::from_iterator(ns, support.iter().map(|&k| rho[k]));
        let x = a.lu().solve(&b).unwrap();
        for (row, &k) in support.iter().enumerate() {
            assert!((n.rho.values()[k] - x[row]).abs() < 1e-10 * x.amax());
        }
        assert_eq!(n.rho.values()[5], 0.0);
        assert_eq!(n.rho.values()[10], 0.0);
    }

    #[test]
    fn newton_uniform_converges_immediately() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let s = SimState::new(Field2D::constant(g, 1.2), Field2D::zeros(g)).unwrap();
        let scheme = SchemeConfig::new(1.0, 0.01).unwrap();
        let n = step_subcritical_newton(&s, &scheme, &DegenerateConfig::new(3.0).unwrap()).unwrap();
        assert!(n.stats.newton_iterations <= 1);
        assert!(n.rho.values().iter().all(|v| (v - 1.2).abs() < 1e-12));
    }

    /// Independent residual of the implicit scheme, written with explicit
    /// face fluxes.
    fn oracle_residual(g: &Grid2D, rho: &[f64], old: &[f64], c: &[f64], m: f64, dt: f64) -> Vec<f64> {
        let nx = g.nx();
        let ny = g.ny();
        let mut flux_x = vec![0.0; rho.len()]; // face (i+1/2, j)
        let mut flux_y = vec![0.0; rho.len()]; // face (i, j+1/2)
        let p = |v: f64| v.max(0.0).powf(m);
        for j in 0..ny {
            for i in 0..nx {
                let k = i + nx * j;
                let kr = (i + 1) % nx + nx * j;
                let ku = i + nx * ((j + 1) % ny);
                flux_x[k] = (p(rho[kr]) - p(rho[k])) / g.dx() - 0.5 * (rho[k] + rho[kr]) * (c[kr] - c[k]) / g.dx();
                flux_y[k] = (p(rho[ku]) - p(rho[k])) / g.dy() - 0.5 * (rho[k] + rho[ku]) * (c[ku] - c[k]) / g.dy();
            }
        }
        let mut out = vec![0.0; rho.len()];
        for j in 0..ny {
            for i in 0..nx {
                let k = i + nx * j;
                let kl = (i + nx - 1) % nx + nx * j;
                let kd = i + nx * ((j + ny - 1) % ny);
                let div = (flux_x[k] - flux_x[kl]) / g.dx() + (flux_y[k] - flux_y[kd]) / g.dy();
                out[k] = rho[k] - old[k] - dt * div;
            }
        }
        out
    }

    #[test]
    fn newton_matches_fixed_point_oracle() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let rho0 = Field2D::from_fn(g, |x, y| 0.5 + 0.4 * (-(x * x + 2.0 * y * y)).exp());
        let s = SimState::new(rho0.clone(), rho0.map(|v| 0.5 * v)).unwrap();
        let (m, dt) = (2.0, 1e-3);
        let scheme = SchemeConfig::new(1.0, dt).unwrap().with_solver(SolverSettings::with_tol(1e-14));
        let cfg = DegenerateConfig::new(m).unwrap();
        let n = step_subcritical_newton(&s, &scheme, &cfg).unwrap();

        // Picard iteration rho <- rho - F(rho) contracts for this small dt
        let c = n.conc.values();
        let mut x = rho0.values().to_vec();
        for _ in 0..500 {
            let f = oracle_residual(&g, &x, rho0.values(), c, m, dt);
            let fmax = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi -= 0.8 * fi;
            }
            if fmax < 1e-15 {
                break;
            }
        }
        let diff = x.iter().zip(n.rho.values()).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(diff <= cfg.newton_tol, "diff {diff}");
        let f = oracle_residual(&g, n.rho.values(), rho0.values(), c, m, dt);
        assert!(f.iter().all(|v| v.abs() <= cfg.newton_tol));
        assert!((n.rho.sum() - rho0.sum()).abs() < 1e-13 * rho0.sum());
    }

    #[test]
    fn newton_close_to_semi_implicit_for_small_dt() {
        let g = Grid2D::square(-1.0, 1.0, 16).unwrap();
        let rho0 = Field2D::from_fn(g, |x, y| 0.5 + 0.4 * (-(x * x + y * y)).exp());
        let s = SimState::new(rho0.clone(), rho0.map(|v| 0.5 * v)).unwrap();
        let mut cfg = DegenerateConfig::new(2.0).unwrap();
        cfg.newton_tol = 1e-13;
        // per unit time the schemes differ by a spatial term plus O(dt)
        let rate = |dt: f64| -> Vec<f64> {
            let scheme = SchemeConfig::new(1.0, dt).unwrap().with_solver(SolverSettings::with_tol(1e-14));
            let a = step_subcritical_newton(&s, &scheme, &cfg).unwrap();
            let b = step_subcritical_semi_implicit(&s, &scheme, &cfg).unwrap();
            a.rho.values().iter().zip(b.rho.values()).map(|(x, y)| (x - y) / dt).collect()
        };
        let (e1, e2, e3) = (rate(4e-4), rate(2e-4), rate(1e-4));
        let gap = |u: &[f64], v: &[f64]| u.iter().zip(v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let ratio = gap(&e1, &e2) / gap(&e2, &e3);
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn newton_reports_failure_with_history() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let s = SimState::new(bump(g), Field2D::zeros(g)).unwrap();
        let scheme = SchemeConfig::new(1.0, 0.1).unwrap();
        let mut cfg = DegenerateConfig::new(4.0).unwrap();
        cfg.newton_max_iter = 1;
        cfg.newton_tol = 1e-300;
        match step_subcritical_newton(&s, &scheme, &cfg) {
            Err(Error::NewtonFailed { history }) => assert!(!history.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_rejects_critical_exponent() {
        assert!(DegenerateConfig::new(1.0).is_err());
        assert!(DegenerateConfig::new(1.5).is_ok());
    }
}
