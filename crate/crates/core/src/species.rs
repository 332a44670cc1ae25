//! Two cell species sharing one chemoattractant:
//!
//! ```text
//! rho_i,t = mu_i Lap rho_i - chi_i div(rho_i grad c)
//! eps c_t = D Lap c + alpha_1 rho_1 + alpha_2 rho_2 - beta c
//! ```
//!
//! Each species is advanced with the symmetrized first-order update using
//! the mobility `exp(chi_i c / mu_i)` and diffusivity `mu_i`.

use crate::error::{Error, Result};
use crate::fokker_planck;
use crate::grid::Field2D;
use crate::linalg::SolverSettings;
use crate::scheme::{count_negatives, screened_solve, StepStats};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSpeciesConfig {
    pub chi: [f64; 2],
    pub mu: [f64; 2],
    pub alpha: [f64; 2],
    pub beta: f64,
    pub diffusion: f64,
    pub epsilon: f64,
    pub dt: f64,
    pub solver: SolverSettings,
}

impl TwoSpeciesConfig {
    /// Unit coefficients except the sensitivities.
    pub fn new(chi: [f64; 2], epsilon: f64, dt: f64) -> Result<Self> {
        let cfg = Self {
            chi,
            mu: [1.0, 1.0],
            alpha: [1.0, 1.0],
            beta: 1.0,
            diffusion: 1.0,
            epsilon,
            dt,
            solver: SolverSettings::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, f64); 9] = [
            ("chi1", self.chi[0]),
            ("chi2", self.chi[1]),
            ("mu1", self.mu[0]),
            ("mu2", self.mu[1]),
            ("alpha1", self.alpha[0]),
            ("alpha2", self.alpha[1]),
            ("beta", self.beta),
            ("diffusion", self.diffusion),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TwoSpeciesState {
    pub rho: [Field2D; 2],
    pub conc: Field2D,
    pub time: f64,
    pub step: usize,
    pub stats: StepStats,
}

impl TwoSpeciesState {
    pub fn new(rho1: Field2D, rho2: Field2D, conc: Field2D) -> Result<Self> {
        if rho1.grid() != conc.grid() || rho2.grid() != conc.grid() {
            return Err(Error::IncompatibleGrids("species and concentration grids differ".into()));
        }
        if !(rho1.is_finite() && rho2.is_finite() && conc.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        Ok(Self {
            rho: [rho1, rho2],
            conc,
            time: 0.0,
            step: 0,
            stats: StepStats::default(),
        })
    }
}

fn species_update(
    rho: &Field2D,
    conc: &Field2D,
    chi: f64,
    mu: f64,
    config: &TwoSpeciesConfig,
) -> Result<(Field2D, usize)> {
    let grid = *rho.grid();
    let lm: Vec<f64> = conc.values().iter().map(|c| chi / mu * c).collect();
    let sol = fokker_planck::solve_cartesian(grid, &lm, rho.values(), 1.0, mu * config.dt, &config.solver)?;
    let max = sol.rho.iter().fold(0.0f64, |m, v| m.max(*v));
    if let Some((index, &min)) = sol.rho.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        if min < -config.solver.tol.max(1e-12) * max {
            return Err(Error::PositivityViolated { min, index, max });
        }
    }
    Ok((Field2D::from_values(grid, sol.rho)?, sol.iterations))
}

/// One step: shared concentration solve, then both species independently.
pub fn step_two_species(state: &TwoSpeciesState, config: &TwoSpeciesConfig) -> Result<TwoSpeciesState> {
    config.validate()?;
    let grid = *state.conc.grid();
    let k = config.epsilon / config.dt;
    let [r1, r2] = &state.rho;
    let rhs: Vec<f64> = state
        .conc
        .values()
        .iter()
        .zip(r1.values().iter().zip(r2.values()))
        .map(|(c, (a, b))| k * c + config.alpha[0] * a + config.alpha[1] * b)
        .collect();
    let (conc, it_c) = screened_solve(
        grid,
        k + config.beta,
        config.diffusion,
        &rhs,
        state.conc.values(),
        &config.solver,
    )?;
    let conc = Field2D::from_values(grid, conc)?;

    let (first, second) = rayon::join(
        || species_update(r1, &conc, config.chi[0], config.mu[0], config),
        || species_update(r2, &conc, config.chi[1], config.mu[1], config),
    );
    let ((n1, it1), (n2, it2)) = (first?, second?);
    let stats = StepStats {
        cg_iterations: it_c + it1 + it2,
        negatives: count_negatives(n1.values()) + count_negatives(n2.values()),
        ..StepStats::default()
    };
    Ok(TwoSpeciesState {
        rho: [n1, n2],
        conc,
        time: state.time + config.dt,
        step: state.step + 1,
        stats,
    })
}
