//! Radially symmetric steppers on the offset grid `r_j = -dr/2 + j dr`.
//!
//! Equations are multiplied through by `r_j`, which makes every system
//! symmetric: the face between `j` and `j+1` carries the weight
//! `sqrt(r_j r_{j+1}) / dr^2`. The face at the origin (between the ghost and
//! `j = 1`) and the outer face at `r = L` carry no flux.

use crate::error::{Error, Result};
use crate::fokker_planck;
use crate::grid::{RadialField, RadialGrid};
use crate::linalg::{tridiag_solve, TridiagonalSystem};
use crate::scheme::{StepStats, MOBILITY_EXPONENT_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialConfig {
    pub epsilon: f64,
    pub dt: f64,
    /// Diffusion exponent; 1 is the critical case.
    pub m: f64,
}

impl RadialConfig {
    pub fn new(epsilon: f64, dt: f64, m: f64) -> Result<Self> {
        let cfg = Self { epsilon, dt, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.m >= 1.0 && self.m.is_finite()) {
            return Err(Error::param("m", format!("must be >= 1, got {}", self.m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RadialState {
    pub rho: RadialField,
    pub conc: RadialField,
    pub time: f64,
    pub step: usize,
    pub stats: StepStats,
}

impl RadialState {
    pub fn new(rho: RadialField, conc: RadialField) -> Result<Self> {
        if rho.grid() != conc.grid() {
            return Err(Error::IncompatibleGrids("density and concentration differ".into()));
        }
        if !rho.is_finite() || !conc.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        let (mut rho, mut conc) = (rho, conc);
        rho.enforce_ghost();
        conc.enforce_ghost();
        Ok(Self {
            rho,
            conc,
            time: 0.0,
            step: 0,
            stats: StepStats::default(),
        })
    }

    pub fn grid(&self) -> &RadialGrid {
        self.rho.grid()
    }
}

/// Face weights `sqrt(r_j r_{j+1}) / dr^2` for the interior faces
/// `j = 1..nr-1`, indexed from 0.
fn face_weights(grid: &RadialGrid) -> Vec<f64> {
    let dr2 = grid.dr() * grid.dr();
    (1..grid.nr()).map(|j| (grid.r(j) * grid.r(j + 1)).sqrt() / dr2).collect()
}

/// `diag_extra[k] * x_k + (L_w x)_k = rhs_k` over `j = 1..=nr`, where `L_w`
/// is the weighted negative Laplacian.
fn weighted_system(grid: &RadialGrid, diag_extra: Vec<f64>, rhs: Vec<f64>) -> TridiagonalSystem {
    let w = face_weights(grid);
    let mut diag = diag_extra;
    for (f, wf) in w.iter().enumerate() {
        diag[f] += wf;
        diag[f + 1] += wf;
    }
    let off: Vec<f64> = w.iter().map(|v| -v).collect();
    TridiagonalSystem {
        sub: off.clone(),
        diag,
        sup: off,
        rhs,
    }
}

fn with_ghost(grid: RadialGrid, interior: Vec<f64>) -> Result<RadialField> {
    let mut v = Vec::with_capacity(interior.len() + 1);
    v.push(interior[0]);
    v.extend(interior);
    RadialField::from_values(grid, v)
}

fn r_weighted_mean(grid: &RadialGrid, f: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (j, v) in f.iter().enumerate().skip(1) {
        num += grid.r(j) * v;
        den += grid.r(j);
    }
    num / den
}

/// Gauged radial Poisson problem `L_w c = r (rho - rho_bar)` with zero
/// r-weighted mean. The row of `c_1` is dropped and `c_1` pinned to zero,
/// then the gauge is restored.
fn radial_elliptic(grid: &RadialGrid, rho: &[f64]) -> Result<RadialField> {
    let nr = grid.nr();
    let mean = r_weighted_mean(grid, rho);
    let full = weighted_system(
        grid,
        vec![0.0; nr],
        (1..=nr).map(|j| grid.r(j) * (rho[j] - mean)).collect(),
    );
    let reduced = TridiagonalSystem {
        sub: full.sub[1..].to_vec(),
        diag: full.diag[1..].to_vec(),
        sup: full.sup[1..].to_vec(),
        rhs: full.rhs[1..].to_vec(),
    };
    let mut c = vec![0.0];
    c.extend(tridiag_solve(&reduced)?);
    let mut field = with_ghost(*grid, c)?;
    let cm = r_weighted_mean(grid, field.values());
    field.values_mut().iter_mut().for_each(|v| *v -= cm);
    Ok(field)
}

/// Concentration update; for `epsilon = 0` the gauged elliptic solve.
pub fn radial_chemo_update(state: &RadialState, config: &RadialConfig) -> Result<RadialField> {
    config.validate()?;
    let grid = *state.grid();
    let rho = state.rho.values();
    if config.epsilon == 0.0 {
        return radial_elliptic(&grid, rho);
    }
    let k = config.epsilon / config.dt;
    let c = state.conc.values();
    let nr = grid.nr();
    let sys = weighted_system(
        &grid,
        (1..=nr).map(|j| k * grid.r(j)).collect(),
        (1..=nr).map(|j| grid.r(j) * (k * c[j] + rho[j])).collect(),
    );
    with_ghost(grid, tridiag_solve(&sys)?)
}

/// Initial concentration solving `(1/r)(r c')' - c + rho = 0`.
pub fn radial_screened_poisson(rho: &RadialField) -> Result<RadialField> {
    let grid = *rho.grid();
    let nr = grid.nr();
    let v = rho.values();
    if !rho.is_finite() {
        return Err(Error::NonFinite("density"));
    }
    let sys = weighted_system(
        &grid,
        (1..=nr).map(|j| grid.r(j)).collect(),
        (1..=nr).map(|j| grid.r(j) * v[j]).collect(),
    );
    with_ghost(grid, tridiag_solve(&sys)?)
}

fn check_positivity(rho: &[f64]) -> Result<()> {
    let max = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    if let Some((index, &min)) = rho.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        if min < -1e-12 * max {
            return Err(Error::PositivityViolated { min, index, max });
        }
    }
    Ok(())
}

/// Critical density update with mobility `exp(conc_next)`.
pub fn radial_density_update(
    state: &RadialState,
    conc_next: &RadialField,
    config: &RadialConfig,
) -> Result<RadialField> {
    config.validate()?;
    let grid = *state.grid();
    if conc_next.grid() != &grid {
        return Err(Error::IncompatibleGrids("concentration grid differs".into()));
    }
    let c = conc_next.interior();
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo > MOBILITY_EXPONENT_LIMIT {
        return Err(Error::MobilityOverflow {
            range: hi - lo,
            max: hi,
            limit: MOBILITY_EXPONENT_LIMIT,
        });
    }
    let rho = fokker_planck::solve_radial(&grid, conc_next.values(), state.rho.values(), 1.0, config.dt)?;
    check_positivity(&rho)?;
    RadialField::from_values(grid, rho)
}

/// `log(rho M)` with `M = exp(c - m/(m-1) rho^(m-1))`; `-inf` where rho = 0.
pub(crate) fn degenerate_log_mobility(rho: f64, c: f64, m: f64) -> f64 {
    if rho > 0.0 {
        rho.ln() + c - m / (m - 1.0) * rho.powf(m - 1.0)
    } else {
        f64::NEG_INFINITY
    }
}

/// Semi-implicit degenerate density update with lagged mobility `rho^n M^n`.
fn radial_degenerate_update(state: &RadialState, config: &RadialConfig) -> Result<RadialField> {
    let grid = *state.grid();
    let rho = state.rho.values();
    if let Some(&neg) = rho.iter().find(|&&v| v < 0.0) {
        return Err(Error::param("rho", format!("degenerate step needs rho >= 0, found {neg:e}")));
    }
    let lm: Vec<f64> = rho
        .iter()
        .zip(state.conc.values())
        .map(|(&r, &c)| degenerate_log_mobility(r, c, config.m))
        .collect();
    let next = fokker_planck::solve_radial(&grid, &lm, rho, 1.0, config.dt)?;
    check_positivity(&next)?;
    RadialField::from_values(grid, next)
}

/// One radial step: concentration first, then density. For `m > 1` the
/// density uses the mobility of the current step.
pub fn step_radial(state: &RadialState, config: &RadialConfig) -> Result<RadialState> {
    config.validate()?;
    let conc = radial_chemo_update(state, config)?;
    let rho = if config.m == 1.0 {
        radial_density_update(state, &conc, config)?
    } else {
        radial_degenerate_update(state, config)?
    };
    let max = rho.max();
    let negatives = rho.interior().iter().filter(|&&v| v < -1e-12 * max).count();
    Ok(RadialState {
        rho,
        conc,
        time: state.time + config.dt,
        step: state.step + 1,
        stats: StepStats {
            negatives,
            ..StepStats::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r_mass(f: &RadialField) -> f64 {
        let g = f.grid();
        (1..=g.nr()).map(|j| g.r(j) * f.values()[j]).sum()
    }

    /// Dense `(1/r_j) d/dr(r g d/dr(u/g))` flux form from the cell values,
    /// with the origin and outer faces closed.
    fn dense_radial_operator(g: &RadialGrid, mob: &[f64], dt: f64) -> DMatrix<f64> {
        let nr = g.nr();
        let dr2 = g.dr() * g.dr();
        let mut a = DMatrix::identity(nr, nr);
        for f in 0..nr - 1 {
            let (p, q) = (f, f + 1);
            let (jp, jq) = (p + 1, q + 1);
            let w = (g.r(jp) * g.r(jq) * mob[jp] * mob[jq]).sqrt() / dr2;
            // flux from q into p: w (u_q/g_q - u_p/g_p)
            a[(p, q)] -= dt * w / (g.r(jp) * mob[jq]);
            a[(p, p)] += dt * w / (g.r(jp) * mob[jp]);
            a[(q, p)] -= dt * w / (g.r(jq) * mob[jp]);
            a[(q, q)] += dt * w / (g.r(jq) * mob[jq]);
        }
        a
    }

    fn dense_weighted(g: &RadialGrid, extra: f64) -> DMatrix<f64> {
        let nr = g.nr();
        let dr2 = g.dr() * g.dr();
        let mut a = DMatrix::zeros(nr, nr);
        for k in 0..nr {
            a[(k, k)] = extra * g.r(k + 1);
        }
        for f in 0..nr - 1 {
            let w = (g.r(f + 1) * g.r(f + 2)).sqrt() / dr2;
            a[(f, f)] += w;
            a[(f + 1, f + 1)] += w;
            a[(f, f + 1)] -= w;
            a[(f + 1, f)] -= w;
        }
        a
    }

    fn random_state(g: RadialGrid, seed: u64) -> RadialState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = (0..=g.nr()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let conc = (0..=g.nr()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        RadialState::new(
            RadialField::from_values(g, rho).unwrap(),
            RadialField::from_values(g, conc).unwrap(),
        )
        .unwrap()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn chemo_trivial_cases() {
        let g = RadialGrid::new(1.0, 10).unwrap();
        let cfg = RadialConfig::new(1.0, 0.1, 1.0).unwrap();
        let s = RadialState::new(RadialField::zeros(g), RadialField::zeros(g)).unwrap();
        assert!(radial_chemo_update(&s, &cfg).unwrap().values().iter().all(|&v| v == 0.0));
        let s = RadialState::new(RadialField::constant(g, 2.0), RadialField::constant(g, 0.5)).unwrap();
        for v in radial_chemo_update(&s, &cfg).unwrap().values() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn chemo_matches_dense() {
        let g = RadialGrid::new(1.0, 8).unwrap();
        let s = random_state(g, 4);
        let cfg = RadialConfig::new(1.0, 0.1, 1.0).unwrap();
        let c = radial_chemo_update(&s, &cfg).unwrap();
        let a = dense_weighted(&g, 10.0);
        let b = DVector::from_iterator(
            8,
            (1..=8).map(|j| g.r(j) * (10.0 * s.conc.values()[j] + s.rho.values()[j])),
        );
        let x = a.lu().solve(&b).unwrap();
        assert!(rel_diff(c.interior(), x.as_slice()) < 1e-10);
        assert_eq!(c.values()[0], c.values()[1]);
    }

    #[test]
    fn elliptic_gauge_and_residual() {
        let g = RadialGrid::new(2.0, 8).unwrap();
        let s = random_state(g, 9);
        let cfg = RadialConfig::new(0.0, 0.1, 1.0).unwrap();
        let c = radial_chemo_update(&s, &cfg).unwrap();
        assert!(r_weighted_mean(&g, c.values()).abs() < 1e-13);
        let mean = r_weighted_mean(&g, s.rho.values());
        let lc = dense_weighted(&g, 0.0) * DVector::from_column_slice(c.interior());
        for k in 0..8 {
            let want = g.r(k + 1) * (s.rho.values()[k + 1] - mean);
            assert!((lc[k] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn screened_poisson_cases() {
        let g = RadialGrid::new(2.0, 80).unwrap();
        let c = radial_screened_poisson(&RadialField::constant(g, 3.0)).unwrap();
        assert!(c.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let c = radial_screened_poisson(&RadialField::zeros(g)).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));

        let rho = RadialField::from_fn(g, |r| 600.0 * (-60.0 * r * r).exp());
        let c = radial_screened_poisson(&rho).unwrap();
        let a = dense_weighted(&g, 1.0);
        let lc = a * DVector::from_column_slice(c.interior());
        for k in 0..80 {
            let want = g.r(k + 1) * rho.values()[k + 1];
            assert!((lc[k] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn density_matches_dense() {
        let g = RadialGrid::new(1.0, 8).unwrap();
        let s = random_state(g, 12);
        let cfg = RadialConfig::new(1.0, 0.05, 1.0).unwrap();
        let c_next = s.conc.clone();
        let rho = radial_density_update(&s, &c_next, &cfg).unwrap();
        let mob: Vec<f64> = c_next.values().iter().map(|c| c.exp()).collect();
        let a = dense_radial_operator(&g, &mob, 0.05);
        let x = a.lu().solve(&DVector::from_column_slice(s.rho.interior())).unwrap();
        assert!(rel_diff(rho.interior(), x.as_slice()) < 1e-10);
        assert!((r_mass(&rho) - r_mass(&s.rho)).abs() < 1e-12 * r_mass(&s.rho));
    }

    #[test]
    fn degenerate_matches_dense_on_support() {
        let g = RadialGrid::new(1.0, 8).unwrap();
        let mut s = random_state(g, 21);
        for j in 6..=8 {
            s.rho.values_mut()[j] = 0.0;
        }
        let m = 3.0;
        let cfg = RadialConfig::new(1.0, 0.05, m).unwrap();
        let next = step_radial(&s, &cfg).unwrap();
        for j in 6..=8 {
            assert_eq!(next.rho.values()[j], 0.0);
        }
        let mob: Vec<f64> = (0..=8)
            .map(|j| degenerate_log_mobility(s.rho.values()[j], s.conc.values()[j], m).exp())
            .collect();
        // support is j = 1..=5
        let gs = RadialGrid::new(1.0, 8).unwrap();
        let a = dense_radial_operator(&gs, &mob, 0.05);
        let a5 = a.view((0, 0), (5, 5)).into_owned();
        let x = a5.lu().solve(&DVector::from_column_slice(&s.rho.values()[1..6])).unwrap();
        assert!(rel_diff(&next.rho.values()[1..6], x.as_slice()) < 1e-10);
    }

    #[test]
    fn uniform_state_fixed_point() {
        let g = RadialGrid::new(1.0, 16).unwrap();
        let s = RadialState::new(RadialField::constant(g, 1.5), RadialField::constant(g, 0.2)).unwrap();
        for m in [1.0, 2.0] {
            let n = step_radial(&s, &RadialConfig::new(1.0, 0.1, m).unwrap()).unwrap();
            assert!(n.rho.values().iter().all(|v| (v - 1.5).abs() < 1e-12));
            assert!(n.conc.values().iter().all(|v| (v - 0.35).abs() < 1e-12));
        }
    }

    #[test]
    fn ghost_is_mirrored() {
        let g = RadialGrid::new(2.0, 20).unwrap();
        let s = random_state(g, 5);
        let n = step_radial(&s, &RadialConfig::new(0.0, 0.1, 1.0).unwrap()).unwrap();
        assert_eq!(n.rho.values()[0], n.rho.values()[1]);
        assert_eq!(n.conc.values()[0], n.conc.values()[1]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(RadialConfig::new(1.0, 0.1, 0.5).is_err());
        assert!(RadialConfig::new(-1.0, 0.1, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn step_conserves_r_mass_and_sign(
                seed in 0u64..10_000,
                m in prop_oneof![Just(1.0), 1.5..8.0f64],
                eps in prop_oneof![Just(0.0), 0.01..1.0f64],
                dt in 1e-3..50.0f64,
            ) {
                let g = RadialGrid::new(2.0, 24).unwrap();
                let s = random_state(g, seed);
                let n = step_radial(&s, &RadialConfig::new(eps, dt, m).unwrap()).unwrap();
                let (m0, m1) = (r_mass(&s.rho), r_mass(&n.rho));
                prop_assert!((m1 - m0).abs() <= 1e-12 * m0);
                prop_assert!(n.rho.min() >= -1e-12 * n.rho.max());
            }
        }
    }
}
