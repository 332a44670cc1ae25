//! Masses, free energies, error norms and the stability monitors.

use crate::error::{Error, Result};
use crate::grid::{discrete_gradient_l2, gradient_energy, Field2D, RadialField};
use crate::linalg::SolverSettings;
use crate::radial::RadialState;
use crate::scheme::{elliptic_chemo_solve_with, SimState};

/// Fields with a quadrature rule for the total mass.
pub trait Quadrature {
    fn total_mass(&self) -> f64;
}

impl Quadrature for Field2D {
    fn total_mass(&self) -> f64 {
        self.sum() * self.grid().cell_area()
    }
}

impl Quadrature for RadialField {
    /// `2 pi sum_{j >= 1} r_j f_j dr`
    fn total_mass(&self) -> f64 {
        let g = self.grid();
        let s: f64 = (1..=g.nr()).map(|j| g.r(j) * self.values()[j]).sum();
        2.0 * std::f64::consts::PI * s * g.dr()
    }
}

pub fn total_mass<F: Quadrature>(f: &F) -> f64 {
    f.total_mass()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyVariant {
    /// `int rho log rho - rho - rho c + |grad c|^2 / 2`
    ParabolicParabolic,
    /// `int rho log rho - rho - (1/2) int rho c` with `c` the gauged periodic
    /// Poisson potential of `rho`.
    ParabolicElliptic,
}

#[inline]
fn entropy(r: f64) -> f64 {
    if r > 0.0 {
        r * r.ln() - r
    } else {
        0.0
    }
}

/// Free energy of a cartesian state. The elliptic variant ignores `conc`
/// and uses the potential of `rho`.
pub fn free_energy(rho: &Field2D, conc: &Field2D, variant: EnergyVariant) -> Result<f64> {
    if rho.grid() != conc.grid() {
        return Err(Error::IncompatibleGrids("density and concentration differ".into()));
    }
    let area = rho.grid().cell_area();
    let ent: f64 = rho.values().iter().map(|&r| entropy(r)).sum::<f64>() * area;
    let value = match variant {
        EnergyVariant::ParabolicParabolic => {
            let pair: f64 = rho.values().iter().zip(conc.values()).map(|(r, c)| r * c).sum::<f64>() * area;
            ent - pair + 0.5 * gradient_energy(conc)
        }
        EnergyVariant::ParabolicElliptic => {
            let pot = elliptic_chemo_solve_with(rho, &SolverSettings::with_tol(1e-12))?;
            let pair: f64 = rho.values().iter().zip(pot.values()).map(|(r, c)| r * c).sum::<f64>() * area;
            ent - 0.5 * pair
        }
    };
    Ok(value)
}

/// Radial free energy with `2 pi r` weights. The gradient term uses face
/// differences weighted by the face radius.
pub fn radial_free_energy(rho: &RadialField, conc: &RadialField, variant: EnergyVariant) -> Result<f64> {
    if rho.grid() != conc.grid() {
        return Err(Error::IncompatibleGrids("density and concentration differ".into()));
    }
    let g = rho.grid();
    let (r, c) = (rho.values(), conc.values());
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut ent = 0.0;
    let mut pair = 0.0;
    for j in 1..=g.nr() {
        ent += g.r(j) * entropy(r[j]);
        pair += g.r(j) * r[j] * c[j];
    }
    let mut grad = 0.0;
    for j in 1..g.nr() {
        let face = 0.5 * (g.r(j) + g.r(j + 1));
        grad += face * ((c[j + 1] - c[j]) / g.dr()).powi(2);
    }
    let dr = g.dr();
    Ok(match variant {
        EnergyVariant::ParabolicParabolic => two_pi * dr * (ent - pair + 0.5 * grad),
        EnergyVariant::ParabolicElliptic => two_pi * dr * (ent - 0.5 * pair),
    })
}

/// `sum |f - g| / sum |f|`. When the grids differ by an integer refinement
/// factor the comparison uses the nodes they share.
pub fn l1_rel_error(f: &Field2D, g: &Field2D) -> Result<f64> {
    let (num, den) = l1_pair(f, g)?;
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(num / den)
}

fn l1_pair(f: &Field2D, g: &Field2D) -> Result<(f64, f64)> {
    let (gf, gg) = (f.grid(), g.grid());
    if gf == gg {
        let num = f.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).sum();
        let den = f.values().iter().map(|a| a.abs()).sum();
        return Ok((num, den));
    }
    let (coarse_is_g, k) = if let Some(k) = gg.refinement_factor(gf) {
        (true, k)
    } else if let Some(k) = gf.refinement_factor(gg) {
        (false, k)
    } else {
        return Err(Error::IncompatibleGrids(format!(
            "{}x{} and {}x{} share no refinement factor",
            gf.nx(),
            gf.ny(),
            gg.nx(),
            gg.ny()
        )));
    };
    let coarse = if coarse_is_g { gg } else { gf };
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..coarse.ny() {
        for i in 0..coarse.nx() {
            let (a, b) = if coarse_is_g {
                (f.get(k * i, k * j), g.get(i, j))
            } else {
                (f.get(i, j), g.get(k * i, k * j))
            };
            num += (a - b).abs();
            den += a.abs();
        }
    }
    Ok((num, den))
}

/// `sum |f - g| dx dy` on a common grid.
pub fn l1_abs(f: &Field2D, g: &Field2D) -> Result<f64> {
    if f.grid() != g.grid() {
        return Err(Error::IncompatibleGrids("l1 distance needs a common grid".into()));
    }
    let s: f64 = f.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s * f.grid().cell_area())
}

/// Least-squares slope of `log err` against `log h`.
pub fn fit_slope(h: &[f64], err: &[f64]) -> Result<f64> {
    if h.len() != err.len() || h.len() < 2 {
        return Err(Error::param("meshes", "slope fit needs at least two (h, error) pairs"));
    }
    if h.iter().chain(err).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::param("meshes", "slope fit needs positive finite values"));
    }
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

fn l2_squared(f: &Field2D) -> f64 {
    f.values().iter().map(|v| v * v).sum::<f64>() * f.grid().cell_area()
}

/// The quantities of the no-blow-up and small-data conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorReading {
    pub grad_rho_l2: f64,
    /// `dt ||grad rho||`, required `<= 1`.
    pub dt_grad_rho: f64,
    /// `||rho||^2 + eps ||grad c||^2`, required `<= 2 exp(-T)`.
    pub small_data_lhs: f64,
    pub small_data_bound: f64,
    pub gradient_ok: bool,
    pub small_data_ok: bool,
}

/// Evaluates both stability conditions. Violations are reported through the
/// flags and at debug level. Never fails.
pub fn stability_monitor(rho: &Field2D, conc: &Field2D, epsilon: f64, dt: f64, horizon: f64) -> MonitorReading {
    let grad_rho_l2 = discrete_gradient_l2(rho);
    let dt_grad_rho = dt * grad_rho_l2;
    let small_data_lhs = l2_squared(rho) + epsilon * gradient_energy(conc);
    let small_data_bound = 2.0 * (-horizon).exp();
    let reading = MonitorReading {
        grad_rho_l2,
        dt_grad_rho,
        small_data_lhs,
        small_data_bound,
        gradient_ok: dt_grad_rho <= 1.0,
        small_data_ok: small_data_lhs <= small_data_bound,
    };
    if !reading.gradient_ok {
        log::debug!("stability monitor: dt*|grad rho| = {dt_grad_rho:.3e} > 1");
    }
    if !reading.small_data_ok {
        log::debug!("stability monitor: small-data quantity {small_data_lhs:.3e} exceeds {small_data_bound:.3e}");
    }
    reading
}

/// Left-hand side of the BDF2 small-data condition, to be compared with
/// `exp(-20 T) / 2`.
pub fn bdf2_small_data_lhs(
    rho1: &Field2D,
    rho0: &Field2D,
    conc1: &Field2D,
    conc0: &Field2D,
    epsilon: f64,
    dt: f64,
) -> f64 {
    let extrap_rho = Field2D::from_values(
        *rho1.grid(),
        rho1.values().iter().zip(rho0.values()).map(|(a, b)| 2.0 * a - b).collect(),
    )
    .expect("same grid");
    let extrap_c = Field2D::from_values(
        *conc1.grid(),
        conc1.values().iter().zip(conc0.values()).map(|(a, b)| 2.0 * a - b).collect(),
    )
    .expect("same grid");
    0.25 * l2_squared(rho1)
        + 0.25 * epsilon * gradient_energy(conc1)
        + 0.25 * l2_squared(&extrap_rho)
        + 0.25 * epsilon * gradient_energy(&extrap_c)
        + dt * l2_squared(rho0)
}

pub fn bdf2_small_data_bound(horizon: f64) -> f64 {
    0.5 * (-20.0 * horizon).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityAudit {
    pub min: f64,
    /// Entries below `-1e-12 * max |f|`.
    pub negatives: usize,
}

pub fn positivity_audit(values: &[f64]) -> PositivityAudit {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let negatives = values.iter().filter(|&&v| v < -1e-12 * max).count();
    PositivityAudit { min, negatives }
}

/// One row of a run's time series.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub time: f64,
    /// One entry per species.
    pub mass: Vec<f64>,
    pub free_energy: f64,
    pub max_rho: f64,
    pub min_rho: f64,
    pub grad_rho_l2: f64,
    pub dt_grad_rho: f64,
    pub small_data_lhs: f64,
    pub cg_iterations: usize,
}

pub fn record(state: &SimState, epsilon: f64, dt: f64, horizon: f64) -> Result<DiagnosticsRecord> {
    let variant = if epsilon > 0.0 {
        EnergyVariant::ParabolicParabolic
    } else {
        EnergyVariant::ParabolicElliptic
    };
    let mon = stability_monitor(&state.rho, &state.conc, epsilon, dt, horizon);
    Ok(DiagnosticsRecord {
        time: state.time,
        mass: vec![total_mass(&state.rho)],
        free_energy: free_energy(&state.rho, &state.conc, variant)?,
        max_rho: state.rho.max(),
        min_rho: state.rho.min(),
        grad_rho_l2: mon.grad_rho_l2,
        dt_grad_rho: mon.dt_grad_rho,
        small_data_lhs: mon.small_data_lhs,
        cg_iterations: state.stats.cg_iterations,
    })
}

pub fn record_radial(state: &RadialState, epsilon: f64, dt: f64) -> Result<DiagnosticsRecord> {
    let variant = if epsilon > 0.0 {
        EnergyVariant::ParabolicParabolic
    } else {
        EnergyVariant::ParabolicElliptic
    };
    let g = state.grid();
    let rho = state.rho.values();
    let two_pi = 2.0 * std::f64::consts::PI;
    // gradient norms with the same face differences as the energy
    let (mut grad_rho, mut grad_c, mut rho_sq) = (0.0, 0.0, 0.0);
    for j in 1..=g.nr() {
        rho_sq += g.r(j) * rho[j] * rho[j];
        if j < g.nr() {
            let face = 0.5 * (g.r(j) + g.r(j + 1));
            grad_rho += face * ((rho[j + 1] - rho[j]) / g.dr()).powi(2);
            let c = state.conc.values();
            grad_c += face * ((c[j + 1] - c[j]) / g.dr()).powi(2);
        }
    }
    let scale = two_pi * g.dr();
    let grad_rho_l2 = (scale * grad_rho).sqrt();
    Ok(DiagnosticsRecord {
        time: state.time,
        mass: vec![total_mass(&state.rho)],
        free_energy: radial_free_energy(&state.rho, &state.conc, variant)?,
        max_rho: state.rho.max(),
        min_rho: state.rho.min(),
        grad_rho_l2,
        dt_grad_rho: dt * grad_rho_l2,
        small_data_lhs: scale * (rho_sq + epsilon * grad_c),
        cg_iterations: state.stats.cg_iterations,
    })
}
