//! Browser bindings: a 2D simulation stepped interactively, the peak-density
//! curve of a radial collapse, and the late-time profile of the degenerate
//! model.

use chemokit::degenerate::semi_implicit_dt_bound;
use chemokit::diagnostics::total_mass;
use chemokit::grid::{Field2D, Grid2D, InitialCondition, RadialField, RadialGrid};
use chemokit::radial::{radial_screened_poisson, step_radial, RadialConfig, RadialState};
use chemokit::scheme::{step, SchemeConfig, SimState};
use wasm_bindgen::prelude::*;

const MAX_CURVE_POINTS: usize = 400;

fn text(e: chemokit::Error) -> String {
    e.to_string()
}

/// Periodic square `[-half_width, half_width]^2` started from a Gaussian
/// density and zero concentration.
#[wasm_bindgen]
pub struct Simulation {
    state: SimState,
    config: SchemeConfig,
}

#[wasm_bindgen]
impl Simulation {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, half_width: f64, amplitude: f64, rate: f64, epsilon: f64, dt: f64) -> Result<Simulation, String> {
        let grid = Grid2D::square(-half_width, half_width, n).map_err(text)?;
        let rho = InitialCondition::Gaussian { amplitude, rate }
            .sample_cartesian(grid)
            .map_err(text)?;
        let state = SimState::new(rho, Field2D::zeros(grid)).map_err(text)?;
        let config = SchemeConfig::new(epsilon, dt).map_err(text)?;
        Ok(Simulation { state, config })
    }

    /// Takes `steps` steps; on failure the state is left at the last good step.
    pub fn advance(&mut self, steps: usize) -> Result<(), String> {
        for _ in 0..steps {
            self.state = step(&self.state, &self.config).map_err(text)?;
        }
        Ok(())
    }

    /// Row-major density values, `n * n` of them.
    pub fn density(&self) -> Vec<f64> {
        self.state.rho.values().to_vec()
    }

    pub fn n(&self) -> usize {
        self.state.grid().nx()
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    pub fn mass(&self) -> f64 {
        total_mass(&self.state.rho)
    }

    pub fn max_density(&self) -> f64 {
        self.state.rho.max()
    }
}

/// Peak density over time for the radial parabolic-elliptic model on a disc
/// of the given radius, stepping with `dt = dr / dt_divisor`. Returns
/// flattened `(t, max rho)` pairs.
#[wasm_bindgen]
pub fn blowup_curve(nr: usize, radius: f64, amplitude: f64, rate: f64, dt_divisor: f64, t_max: f64) -> Result<Vec<f64>, String> {
    if !(dt_divisor > 0.0 && t_max > 0.0) {
        return Err("dt_divisor and t_max must be positive".into());
    }
    let grid = RadialGrid::new(radius, nr).map_err(text)?;
    let rho = RadialField::from_fn(grid, |r| amplitude * (-rate * r * r).exp());
    let conc = radial_screened_poisson(&rho).map_err(text)?;
    let mut state = RadialState::new(rho, conc).map_err(text)?;
    let config = RadialConfig::new(0.0, grid.dr() / dt_divisor, 1.0).map_err(text)?;
    let steps = (t_max / config.dt).ceil() as usize;
    let stride = steps.div_ceil(MAX_CURVE_POINTS).max(1);
    let mut curve = vec![0.0, state.rho.max()];
    for k in 1..=steps {
        state = step_radial(&state, &config).map_err(text)?;
        if k % stride == 0 || k == steps {
            curve.extend([state.time, state.rho.max()]);
        }
    }
    Ok(curve)
}

/// Radial degenerate model with exponent `m` from an indicator of height 1
/// on `r^2 <= 0.1`, run to `t_max` with a step inside the semi-implicit
/// stability bound. Returns `nr` radii followed by `nr` densities.
#[wasm_bindgen]
pub fn steady_profile(m: f64, nr: usize, radius: f64, t_max: f64) -> Result<Vec<f64>, String> {
    if !(m > 1.0 && t_max > 0.0) {
        return Err("m must exceed 1 and t_max must be positive".into());
    }
    let grid = RadialGrid::new(radius, nr).map_err(text)?;
    let rho = InitialCondition::IndicatorDisc {
        value: 1.0,
        r2_max: 0.1,
    }
    .sample_radial(grid)
    .map_err(text)?;
    let conc = RadialField::from_values(grid, rho.values().iter().map(|v| 0.5 * v).collect()).map_err(text)?;
    let mut state = RadialState::new(rho, conc).map_err(text)?;
    let dt = (0.75 * semi_implicit_dt_bound(m, 1.0, grid.dr(), 1)).min(1e-3);
    let config = RadialConfig::new(0.0, dt, m).map_err(text)?;
    let steps = (t_max / dt).ceil() as usize;
    for _ in 0..steps {
        state = step_radial(&state, &config).map_err(text)?;
    }
    let mut out: Vec<f64> = (1..=nr).map(|j| grid.r(j)).collect();
    out.extend_from_slice(state.rho.interior());
    Ok(out)
}
