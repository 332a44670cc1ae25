//! Experiment drivers. A spec expands into independent runs over the
//! product of its meshes, step rules, epsilons, exponents and orders; runs
//! execute on a thread pool and the study's derived quantities are computed
//! once all of them finish.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{ConcInit, DtRule, ExperimentSpec, Geometry, Kind, Stepper};
use crate::degenerate::{semi_implicit_dt_bound, step_subcritical_newton, step_subcritical_semi_implicit, DegenerateConfig};
use crate::diagnostics::{l1_abs, l1_rel_error, record, record_radial, total_mass, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, RadialField, RadialGrid};
use crate::output::{write_atomic, Snapshot, Table, TimeSeries};
use crate::radial::{radial_screened_poisson, step_radial, RadialConfig, RadialState};
use crate::scheme::{elliptic_chemo_solve, step, SchemeConfig, SchemeOrder, SimState};
use crate::species::{step_two_species, TwoSpeciesConfig, TwoSpeciesState};

/// At most this many stored field samples per run for the epsilon study.
const MAX_SAMPLES: usize = 400;

/// One point of the parameter product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub mesh: usize,
    pub dt_rule: DtRule,
    pub epsilon: f64,
    pub m: f64,
    pub order: SchemeOrder,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub job: Job,
    /// Mesh spacing (`dx` or `dr`) and the step actually used.
    pub h: f64,
    pub dt: f64,
    /// Completed steps.
    pub steps: usize,
    /// One series per species.
    pub series: Vec<TimeSeries>,
    pub initial: Vec<DiagnosticsRecord>,
    pub snapshots: Vec<(String, Snapshot)>,
    /// Largest density seen, per species.
    pub peaks: Vec<f64>,
    /// `(time, rho, conc)` at evenly spaced steps, kept for the epsilon study.
    pub samples: Vec<(f64, Field2D, Field2D)>,
    pub first_density: Option<Density>,
    pub last_density: Option<Density>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    Cartesian(Field2D),
    Radial(RadialField),
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub kind: Kind,
    pub runs: Vec<RunOutcome>,
    pub tables: Vec<Table>,
    /// Named scalar results of the study, e.g. fitted slopes.
    pub derived: Vec<(String, f64)>,
    /// Extra CSV files by name.
    pub csv: Vec<(String, String)>,
}

impl ExperimentReport {
    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn derived(&self, name: &str) -> Option<f64> {
        self.derived.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut runs = Table::new(format!("{} runs", self.kind.name()), &["run", "steps", "dt", "status"]);
        for r in &self.runs {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            };
            runs.row(vec![r.label.clone(), r.steps.to_string(), format!("{:.4e}", r.dt), status]);
        }
        out.push_str(&runs.render());
        for t in &self.tables {
            out.push('\n');
            out.push_str(&t.render());
        }
        for r in &self.runs {
            for w in &r.warnings {
                out.push_str(&format!("\nwarning [{}]: {w}", r.label));
            }
        }
        if self.runs.iter().any(|r| !r.warnings.is_empty()) {
            out.push('\n');
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn fmt_sci(v: f64) -> String {
    format!("{v:.4e}")
}

pub fn jobs(spec: &ExperimentSpec) -> Vec<Job> {
    let mut eps = spec.epsilon.clone();
    if spec.kind == Kind::Asymptotic && !eps.contains(&0.0) {
        eps.push(0.0);
    }
    let mut out = Vec::new();
    for &mesh in &spec.meshes {
        for &dt_rule in &spec.dt {
            for &epsilon in &eps {
                for &m in &spec.m {
                    for &order in &spec.orders {
                        out.push(Job {
                            mesh,
                            dt_rule,
                            epsilon,
                            m,
                            order,
                        });
                    }
                }
            }
        }
    }
    out
}

fn label(spec: &ExperimentSpec, job: &Job) -> String {
    let mut parts = vec![format!("n{}", job.mesh)];
    if spec.dt.len() > 1 {
        parts.push(format!("dt{}", job.dt_rule.label()));
    }
    if spec.epsilon.len() > 1 || spec.kind == Kind::Asymptotic {
        parts.push(format!("eps{}", job.epsilon));
    }
    if spec.m.len() > 1 {
        parts.push(format!("m{}", job.m));
    }
    if spec.orders.len() > 1 {
        parts.push(
            match job.order {
                SchemeOrder::First => "first",
                SchemeOrder::Bdf2 => "bdf2",
            }
            .to_string(),
        );
    }
    parts.join("_")
}

fn cartesian_grid(spec: &ExperimentSpec, mesh: usize) -> Result<Grid2D> {
    let (a, b, c, d) = spec.domain;
    let ny = spec
        .ny
        .unwrap_or_else(|| ((mesh as f64) * (d - c) / (b - a)).round().max(2.0) as usize);
    Grid2D::new(a, b, c, d, mesh, ny)
}

fn cartesian_conc(spec: &ExperimentSpec, rho: &Field2D) -> Result<Field2D> {
    let g = *rho.grid();
    Ok(match spec.conc {
        ConcInit::Zero => Field2D::zeros(g),
        ConcInit::HalfRho => rho.map(|v| 0.5 * v),
        ConcInit::Gaussian { amplitude, rate } => Field2D::from_fn(g, |x, y| amplitude * (-rate * (x * x + y * y)).exp()),
        ConcInit::Elliptic => elliptic_chemo_solve(rho)?,
    })
}

fn radial_conc(spec: &ExperimentSpec, rho: &RadialField) -> Result<RadialField> {
    let g = *rho.grid();
    Ok(match spec.conc {
        ConcInit::Zero => RadialField::zeros(g),
        ConcInit::HalfRho => RadialField::from_values(g, rho.values().iter().map(|v| 0.5 * v).collect())?,
        ConcInit::Gaussian { amplitude, rate } => RadialField::from_fn(g, |r| amplitude * (-rate * r * r).exp()),
        ConcInit::Elliptic => radial_screened_poisson(rho)?,
    })
}

enum Sim {
    Cartesian {
        state: SimState,
        scheme: SchemeConfig,
        degenerate: Option<(DegenerateConfig, Stepper)>,
    },
    Radial {
        state: RadialState,
        config: RadialConfig,
    },
    Two {
        state: TwoSpeciesState,
        config: TwoSpeciesConfig,
    },
}

impl Sim {
    fn build(spec: &ExperimentSpec, job: &Job, dt: f64) -> Result<(Sim, f64)> {
        if spec.geometry == Geometry::Radial {
            let grid = RadialGrid::new(spec.radius, job.mesh)?;
            let rho = spec.ic.sample_radial(grid)?;
            let conc = radial_conc(spec, &rho)?;
            let config = RadialConfig::new(job.epsilon, dt, job.m)?;
            return Ok((
                Sim::Radial {
                    state: RadialState::new(rho, conc)?,
                    config,
                },
                grid.dr(),
            ));
        }
        let grid = cartesian_grid(spec, job.mesh)?;
        let rho = spec.ic.sample_cartesian(grid)?;
        let conc = cartesian_conc(spec, &rho)?;
        let h = grid.dx().max(grid.dy());
        if spec.kind == Kind::TwoSpecies {
            let mut config = TwoSpeciesConfig::new(spec.chi, job.epsilon, dt)?;
            config.mu = spec.mu;
            config.alpha = spec.alpha;
            config.beta = spec.beta;
            config.diffusion = spec.diffusion;
            config.validate()?;
            let state = TwoSpeciesState::new(rho.clone(), rho, conc)?;
            return Ok((Sim::Two { state, config }, h));
        }
        let scheme = SchemeConfig::new(job.epsilon, dt)?.with_order(job.order);
        let degenerate = if job.m > 1.0 {
            Some((DegenerateConfig::new(job.m)?, spec.stepper))
        } else {
            None
        };
        Ok((
            Sim::Cartesian {
                state: SimState::new(rho, conc)?,
                scheme,
                degenerate,
            },
            h,
        ))
    }

    fn advance(&mut self) -> Result<()> {
        match self {
            Sim::Cartesian {
                state,
                scheme,
                degenerate,
            } => {
                *state = match degenerate {
                    None => step(state, scheme)?,
                    Some((cfg, Stepper::SemiImplicit)) => step_subcritical_semi_implicit(state, scheme, cfg)?,
                    Some((cfg, Stepper::Newton)) => step_subcritical_newton(state, scheme, cfg)?,
                };
            }
            Sim::Radial { state, config } => *state = step_radial(state, config)?,
            Sim::Two { state, config } => *state = step_two_species(state, config)?,
        }
        Ok(())
    }

    fn time(&self) -> f64 {
        match self {
            Sim::Cartesian { state, .. } => state.time,
            Sim::Radial { state, .. } => state.time,
            Sim::Two { state, .. } => state.time,
        }
    }

    fn records(&self, horizon: f64) -> Result<Vec<DiagnosticsRecord>> {
        match self {
            Sim::Cartesian { state, scheme, .. } => Ok(vec![record(state, scheme.epsilon, scheme.dt, horizon)?]),
            Sim::Radial { state, config } => Ok(vec![record_radial(state, config.epsilon, config.dt)?]),
            Sim::Two { state, config } => state
                .rho
                .iter()
                .map(|rho| {
                    let mut single = SimState::new(rho.clone(), state.conc.clone())?;
                    single.time = state.time;
                    single.step = state.step;
                    single.stats = state.stats;
                    record(&single, config.epsilon, config.dt, horizon)
                })
                .collect(),
        }
    }

    fn peaks(&self) -> Vec<f64> {
        match self {
            Sim::Cartesian { state, .. } => vec![state.rho.max()],
            Sim::Radial { state, .. } => vec![state.rho.max()],
            Sim::Two { state, .. } => state.rho.iter().map(|r| r.max()).collect(),
        }
    }

    fn density(&self) -> Density {
        match self {
            Sim::Cartesian { state, .. } => Density::Cartesian(state.rho.clone()),
            Sim::Radial { state, .. } => Density::Radial(state.rho.clone()),
            Sim::Two { state, .. } => Density::Cartesian(state.rho[0].clone()),
        }
    }

    /// Fields at the current time, named after the requested time.
    fn snapshots(&self, requested: f64) -> Vec<(String, Snapshot)> {
        let tag = format!("t{requested}");
        let time = self.time();
        match self {
            Sim::Cartesian { state, .. } => vec![
                (format!("rho_{tag}"), Snapshot::cartesian(&state.rho, time)),
                (format!("conc_{tag}"), Snapshot::cartesian(&state.conc, time)),
            ],
            Sim::Radial { state, .. } => vec![
                (format!("rho_{tag}"), Snapshot::radial(&state.rho, time)),
                (format!("conc_{tag}"), Snapshot::radial(&state.conc, time)),
            ],
            Sim::Two { state, .. } => vec![
                (format!("rho1_{tag}"), Snapshot::cartesian(&state.rho[0], time)),
                (format!("rho2_{tag}"), Snapshot::cartesian(&state.rho[1], time)),
                (format!("conc_{tag}"), Snapshot::cartesian(&state.conc, time)),
            ],
        }
    }

    fn sample(&self) -> Option<(f64, Field2D, Field2D)> {
        match self {
            Sim::Cartesian { state, .. } => Some((state.time, state.rho.clone(), state.conc.clone())),
            _ => None,
        }
    }
}

/// Runs one job to `t_max`. Failures end the run and are kept in the
/// outcome with whatever was recorded before.
pub fn run_job(spec: &ExperimentSpec, job: Job) -> RunOutcome {
    let label = label(spec, &job);
    let mut outcome = RunOutcome {
        label,
        job,
        h: f64::NAN,
        dt: f64::NAN,
        steps: 0,
        series: Vec::new(),
        initial: Vec::new(),
        snapshots: Vec::new(),
        peaks: Vec::new(),
        samples: Vec::new(),
        first_density: None,
        last_density: None,
        warnings: Vec::new(),
        error: None,
    };
    if let Err(e) = drive(spec, &mut outcome) {
        log::warn!("run {} failed: {e}", outcome.label);
        outcome.error = Some(e.to_string());
    }
    outcome
}

fn drive(spec: &ExperimentSpec, out: &mut RunOutcome) -> Result<()> {
    let job = out.job;
    let h = match spec.geometry {
        Geometry::Radial => RadialGrid::new(spec.radius, job.mesh)?.dr(),
        Geometry::Cartesian => {
            let g = cartesian_grid(spec, job.mesh)?;
            g.dx().max(g.dy())
        }
    };
    let (steps, dt) = job.dt_rule.schedule(h, spec.t_max);
    out.h = h;
    out.dt = dt;
    let (mut sim, _) = Sim::build(spec, &job, dt)?;

    if job.m > 1.0 && (spec.geometry == Geometry::Radial || spec.stepper == Stepper::SemiImplicit) {
        let dims = if spec.geometry == Geometry::Radial { 1 } else { 2 };
        let peak = sim.peaks()[0];
        let bound = semi_implicit_dt_bound(job.m, peak, h, dims);
        if dt > bound {
            let msg = format!("dt = {dt:.3e} exceeds the lagged-mobility stability bound {bound:.3e} for m = {}", job.m);
            log::warn!("{}: {msg}", out.label);
            out.warnings.push(msg);
        }
    }

    let initial = sim.records(spec.t_max)?;
    out.series = vec![TimeSeries::new(); initial.len()];
    out.initial = initial;
    out.peaks = sim.peaks();
    out.first_density = Some(sim.density());
    let snap_steps: Vec<(usize, f64)> = spec
        .snapshots
        .iter()
        .map(|&t| (((t / dt).round() as usize).min(steps), t))
        .collect();
    let take_snapshots = |sim: &Sim, k: usize, out: &mut RunOutcome| {
        for &(s, t) in &snap_steps {
            if s == k {
                out.snapshots.extend(sim.snapshots(t));
            }
        }
    };
    take_snapshots(&sim, 0, out);
    let sample_every = if spec.kind == Kind::Asymptotic {
        steps.div_ceil(MAX_SAMPLES).max(1)
    } else {
        usize::MAX
    };
    if spec.kind == Kind::Asymptotic {
        out.samples.extend(sim.sample());
    }

    let mut gradient_warned = false;
    for k in 1..=steps {
        let stepped = sim.advance();
        if let Err(e) = stepped {
            out.last_density = Some(sim.density());
            return Err(Error::param(
                "run",
                format!("step {k} (t = {:.6e}) failed: {e}", sim.time()),
            ));
        }
        out.steps = k;
        for (p, v) in out.peaks.iter_mut().zip(sim.peaks()) {
            *p = p.max(v);
        }
        if k % spec.stride == 0 || k == steps {
            let recs = sim.records(spec.t_max)?;
            for (series, r) in out.series.iter_mut().zip(recs) {
                if !gradient_warned && job.m == 1.0 && r.dt_grad_rho > 1.0 {
                    gradient_warned = true;
                    let msg = format!("dt*|grad rho| = {:.3e} > 1 first at t = {:.6e}", r.dt_grad_rho, r.time);
                    log::warn!("{}: {msg}", out.label);
                    out.warnings.push(msg);
                }
                series.push(r)?;
            }
        }
        if k % sample_every == 0 || (spec.kind == Kind::Asymptotic && k == steps) {
            if out.samples.last().map(|s| s.0) != Some(sim.time()) {
                out.samples.extend(sim.sample());
            }
        }
        take_snapshots(&sim, k, out);
    }
    out.last_density = Some(sim.density());
    Ok(())
}

/// Runs every job of `spec` on a pool of `threads` workers and computes the
/// study's derived outputs.
pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<ExperimentReport> {
    spec.validate()?;
    let jobs = jobs(spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::param("threads", e.to_string()))?;
    let runs: Vec<RunOutcome> = pool.install(|| jobs.par_iter().map(|&job| run_job(spec, job)).collect());
    let mut report = ExperimentReport {
        kind: spec.kind,
        runs,
        tables: Vec::new(),
        derived: Vec::new(),
        csv: Vec::new(),
    };
    match spec.kind {
        Kind::Run => derive_run(&mut report),
        Kind::Convergence => derive_convergence(spec, &mut report),
        Kind::Asymptotic => derive_asymptotic(spec, &mut report),
        Kind::Energy => derive_energy(&mut report),
        Kind::BlowupRadial | Kind::BlowupCartesian => derive_blowup(&mut report),
        Kind::SteadySubcritical => derive_steady(&mut report),
        Kind::TwoSpecies => derive_two_species(&mut report),
    }
    Ok(report)
}

fn mass_drift(run: &RunOutcome) -> f64 {
    run.series
        .iter()
        .zip(&run.initial)
        .filter_map(|(s, init)| {
            let m0: f64 = init.mass.iter().sum();
            s.last().map(|r| {
                let m: f64 = r.mass.iter().sum();
                if m0 == 0.0 {
                    m.abs()
                } else {
                    ((m - m0) / m0).abs()
                }
            })
        })
        .fold(0.0, f64::max)
}

fn derive_run(report: &mut ExperimentReport) {
    let mut t = Table::new("final state", &["run", "time", "mass drift", "max rho", "min rho", "free energy"]);
    for r in &report.runs {
        if let Some(last) = r.series.first().and_then(|s| s.last()) {
            t.row(vec![
                r.label.clone(),
                format!("{:.6}", last.time),
                fmt_sci(mass_drift(r)),
                fmt_sci(last.max_rho),
                fmt_sci(last.min_rho),
                fmt_sci(last.free_energy),
            ]);
        }
    }
    report.tables.push(t);
}

fn order_name(o: SchemeOrder) -> &'static str {
    match o {
        SchemeOrder::First => "first",
        SchemeOrder::Bdf2 => "bdf2",
    }
}

fn derive_convergence(spec: &ExperimentSpec, report: &mut ExperimentReport) {
    let mut per_mesh = Table::new(
        "self-convergence (error against the next coarser mesh)",
        &["order", "epsilon", "dt rule", "mesh", "h", "error", "pairwise slope"],
    );
    let mut fits = Table::new("fitted slopes", &["order", "epsilon", "dt rule", "slope"]);
    for &order in &spec.orders {
        for &eps in &spec.epsilon {
            for &rule in &spec.dt {
                let mut group: Vec<&RunOutcome> = report
                    .runs
                    .iter()
                    .filter(|r| r.job.order == order && r.job.epsilon == eps && r.job.dt_rule == rule)
                    .collect();
                group.sort_by_key(|r| r.job.mesh);
                let mut hs = Vec::new();
                let mut errs = Vec::new();
                let mut prev_err: Option<(f64, f64)> = None;
                for (k, r) in group.iter().enumerate() {
                    let err = if k == 0 {
                        None
                    } else {
                        match (&group[k - 1].last_density, &r.last_density, &group[k - 1].error, &r.error) {
                            (Some(Density::Cartesian(c)), Some(Density::Cartesian(f)), None, None) => l1_rel_error(f, c).ok(),
                            _ => None,
                        }
                    };
                    let slope = match (err, prev_err) {
                        (Some(e), Some((h0, e0))) => Some((e / e0).ln() / (r.h / h0).ln()),
                        _ => None,
                    };
                    per_mesh.row(vec![
                        order_name(order).into(),
                        fmt_num(eps),
                        rule.label(),
                        r.job.mesh.to_string(),
                        fmt_num(r.h),
                        err.map(fmt_sci).unwrap_or_else(|| "-".into()),
                        slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into()),
                    ]);
                    if let Some(e) = err {
                        hs.push(r.h);
                        errs.push(e);
                    }
                    prev_err = err.map(|e| (r.h, e));
                }
                let fitted = crate::diagnostics::fit_slope(&hs, &errs).ok();
                fits.row(vec![
                    order_name(order).into(),
                    fmt_num(eps),
                    rule.label(),
                    fitted.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into()),
                ]);
                if let Some(s) = fitted {
                    report
                        .derived
                        .push((format!("slope order={} eps={eps} dt={}", order_name(order), rule.label()), s));
                }
            }
        }
    }
    report.tables.push(per_mesh);
    report.tables.push(fits);
}

fn mean_free(f: &Field2D) -> Field2D {
    let m = f.mean();
    f.map(|v| v - m)
}

fn derive_asymptotic(spec: &ExperimentSpec, report: &mut ExperimentReport) {
    let mut eps: Vec<f64> = spec.epsilon.iter().copied().filter(|&e| e > 0.0).collect();
    eps.sort_by(|a, b| b.total_cmp(a));
    let window = (0.2 * spec.t_max, 0.5 * spec.t_max);
    let mut ratios = Table::new(
        format!("post-layer error ratios between consecutive epsilon, t in [{}, {}]", window.0, window.1),
        &["mesh", "dt rule", "pair", "rho min", "rho max", "conc min", "conc max"],
    );
    let mut layers = Table::new("end of the initial layer in the concentration error", &["mesh", "dt rule", "t_layer"]);
    for &mesh in &spec.meshes {
        for &rule in &spec.dt {
            let find = |e: f64| {
                report
                    .runs
                    .iter()
                    .find(|r| r.job.mesh == mesh && r.job.dt_rule == rule && r.job.epsilon == e && r.error.is_none())
            };
            let Some(reference) = find(0.0) else { continue };
            let runs: Vec<&RunOutcome> = eps.iter().filter_map(|&e| find(e)).collect();
            if runs.len() != eps.len() {
                continue;
            }
            let n = runs.iter().map(|r| r.samples.len()).chain([reference.samples.len()]).min().unwrap_or(0);
            let mut header = vec!["time".to_string()];
            header.extend(eps.iter().map(|e| format!("rho_err_eps{e}")));
            header.extend(eps.iter().map(|e| format!("conc_err_eps{e}")));
            let mut csv = header.join(",") + "\n";
            let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
            for k in 0..n {
                let (t, r0, c0) = &reference.samples[k];
                let c0 = mean_free(c0);
                let er: Vec<f64> = runs.iter().map(|r| l1_abs(&r.samples[k].1, r0).unwrap_or(f64::NAN)).collect();
                let ec: Vec<f64> = runs
                    .iter()
                    .map(|r| l1_abs(&mean_free(&r.samples[k].2), &c0).unwrap_or(f64::NAN))
                    .collect();
                let cells: Vec<String> = std::iter::once(*t).chain(er.iter().copied()).chain(ec.iter().copied()).map(|v| format!("{v:.16e}")).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
                rows.push((*t, er, ec));
            }
            let tag = format!("n{mesh}_dt{}", rule.label());
            report.csv.push((format!("asymptotic_errors_{tag}.csv"), csv));

            for p in 0..eps.len().saturating_sub(1) {
                let in_window = rows.iter().filter(|(t, _, _)| *t >= window.0 - 1e-12 && *t <= window.1 + 1e-12);
                let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for (_, er, ec) in in_window {
                    let rr = er[p] / er[p + 1];
                    let cr = ec[p] / ec[p + 1];
                    rmin = rmin.min(rr);
                    rmax = rmax.max(rr);
                    cmin = cmin.min(cr);
                    cmax = cmax.max(cr);
                }
                let pair = format!("{}/{}", eps[p], eps[p + 1]);
                ratios.row(vec![mesh.to_string(), rule.label(), pair.clone(), format!("{rmin:.3}"), format!("{rmax:.3}"), format!("{cmin:.3}"), format!("{cmax:.3}")]);
                report.derived.push((format!("rho ratio min {tag} {pair}"), rmin));
                report.derived.push((format!("rho ratio max {tag} {pair}"), rmax));
                report.derived.push((format!("conc ratio min {tag} {pair}"), cmin));
                report.derived.push((format!("conc ratio max {tag} {pair}"), cmax));
            }
            // the layer ends once every consecutive concentration ratio stays
            // in the O(eps) band for the rest of the run
            let in_band = |ec: &[f64]| (0..ec.len().saturating_sub(1)).all(|p| (5.0..=20.0).contains(&(ec[p] / ec[p + 1])));
            let mut layer_end = f64::NAN;
            for k in (0..rows.len()).rev() {
                if rows[k].0 > 0.0 && in_band(&rows[k].2) {
                    layer_end = rows[k].0;
                } else {
                    break;
                }
            }
            layers.row(vec![mesh.to_string(), rule.label(), format!("{layer_end:.4}")]);
            report.derived.push((format!("layer end {tag}"), layer_end));
        }
    }
    report.tables.push(ratios);
    report.tables.push(layers);
}

fn derive_energy(report: &mut ExperimentReport) {
    let mut t = Table::new("free energy", &["run", "initial", "final", "largest relative increase"]);
    for r in &report.runs {
        let (Some(series), Some(init)) = (r.series.first(), r.initial.first()) else { continue };
        let mut prev = init.free_energy;
        let mut worst = f64::NEG_INFINITY;
        for rec in series.records() {
            let scale = prev.abs().max(f64::MIN_POSITIVE);
            worst = worst.max((rec.free_energy - prev) / scale);
            prev = rec.free_energy;
        }
        t.row(vec![r.label.clone(), fmt_sci(init.free_energy), fmt_sci(prev), fmt_sci(worst)]);
        report.derived.push((format!("max increase {}", r.label), worst));
    }
    report.tables.push(t);
}

fn derive_blowup(report: &mut ExperimentReport) {
    let mut t = Table::new("peak density", &["run", "h", "peak max rho", "ratio to previous", "(h_prev/h)^2"]);
    let mut runs: Vec<&RunOutcome> = report.runs.iter().collect();
    runs.sort_by(|a, b| b.h.total_cmp(&a.h));
    let mut prev: Option<&RunOutcome> = None;
    for r in runs {
        let peak = r.peaks.first().copied().unwrap_or(f64::NAN);
        let (ratio, nominal) = match prev {
            Some(p) => {
                let ratio = peak / p.peaks.first().copied().unwrap_or(f64::NAN);
                let nominal = (p.h / r.h).powi(2);
                report.derived.push((format!("peak ratio {}/{}", r.label, p.label), ratio));
                (format!("{ratio:.4}"), fmt_num(nominal))
            }
            None => ("-".into(), "-".into()),
        };
        t.row(vec![r.label.clone(), fmt_num(r.h), fmt_sci(peak), ratio, nominal]);
        report.derived.push((format!("peak {}", r.label), peak));
        prev = Some(r);
    }
    report.tables.push(t);
}

/// L1 distance between two densities on the same grid.
pub fn density_distance(a: &Density, b: &Density) -> Result<f64> {
    match (a, b) {
        (Density::Cartesian(f), Density::Cartesian(g)) => l1_abs(f, g),
        (Density::Radial(f), Density::Radial(g)) => {
            if f.grid() != g.grid() {
                return Err(Error::IncompatibleGrids("radial densities differ in grid".into()));
            }
            let diff = RadialField::from_values(
                *f.grid(),
                f.values().iter().zip(g.values()).map(|(x, y)| (x - y).abs()).collect(),
            )?;
            Ok(total_mass(&diff))
        }
        _ => Err(Error::IncompatibleGrids("cartesian and radial densities".into())),
    }
}

fn derive_steady(report: &mut ExperimentReport) {
    let mut t = Table::new("L1 distance to the initial indicator", &["run", "m", "distance", "max rho"]);
    let mut runs: Vec<&RunOutcome> = report.runs.iter().collect();
    runs.sort_by(|a, b| a.job.m.total_cmp(&b.job.m));
    for r in runs {
        let dist = match (&r.first_density, &r.last_density, &r.error) {
            (Some(a), Some(b), None) => density_distance(a, b).ok(),
            _ => None,
        };
        let max = r.series.first().and_then(|s| s.last()).map(|l| l.max_rho);
        t.row(vec![
            r.label.clone(),
            fmt_num(r.job.m),
            dist.map(fmt_sci).unwrap_or_else(|| "-".into()),
            max.map(fmt_sci).unwrap_or_else(|| "-".into()),
        ]);
        if let Some(d) = dist {
            report.derived.push((format!("distance {}", r.label), d));
        }
    }
    report.tables.push(t);
}

fn derive_two_species(report: &mut ExperimentReport) {
    let mut t = Table::new(
        "species peaks",
        &["run", "h", "max rho1", "max rho2", "mass drift", "rho1 ratio", "rho2 ratio"],
    );
    let mut runs: Vec<&RunOutcome> = report.runs.iter().collect();
    runs.sort_by(|a, b| b.h.total_cmp(&a.h));
    let mut prev: Option<&RunOutcome> = None;
    for r in runs {
        let last: Vec<f64> = r.series.iter().map(|s| s.last().map(|l| l.max_rho).unwrap_or(f64::NAN)).collect();
        let (a, b) = (last.first().copied().unwrap_or(f64::NAN), last.get(1).copied().unwrap_or(f64::NAN));
        let ratios = match prev {
            Some(p) => {
                let pl: Vec<f64> = p.series.iter().map(|s| s.last().map(|l| l.max_rho).unwrap_or(f64::NAN)).collect();
                let (ra, rb) = (a / pl[0], b / pl[1]);
                report.derived.push((format!("rho1 ratio {}/{}", r.label, p.label), ra));
                report.derived.push((format!("rho2 ratio {}/{}", r.label, p.label), rb));
                (format!("{ra:.4}"), format!("{rb:.4}"))
            }
            None => ("-".into(), "-".into()),
        };
        t.row(vec![r.label.clone(), fmt_num(r.h), fmt_sci(a), fmt_sci(b), fmt_sci(mass_drift(r)), ratios.0, ratios.1]);
        report.derived.push((format!("max rho1 {}", r.label), a));
        report.derived.push((format!("max rho2 {}", r.label), b));
        report.derived.push((format!("mass drift {}", r.label), mass_drift(r)));
        prev = Some(r);
    }
    report.tables.push(t);
}

/// Writes the per-run series, snapshots, extra tables and `summary.txt`
/// under `dir`. Returns the written paths.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: &str| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, contents.as_bytes())?;
        written.push(path);
        Ok(())
    };
    for r in &report.runs {
        for (k, s) in r.series.iter().enumerate() {
            let name = if r.series.len() == 1 {
                format!("{}.csv", r.label)
            } else {
                format!("{}_species{}.csv", r.label, k + 1)
            };
            put(name, &s.to_csv())?;
        }
        for (name, snap) in &r.snapshots {
            put(format!("{}_{name}.csv", r.label), &snap.to_csv())?;
        }
    }
    for (name, text) in &report.csv {
        put(name.clone(), text)?;
    }
    put("summary.txt".into(), &report.summary())?;
    Ok(written)
}
