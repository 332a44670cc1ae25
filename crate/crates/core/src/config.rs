//! Experiment configuration. A config file holds one `[kind]` section of
//! `key = value` lines; `#` starts a comment. List values are comma
//! separated.
//!
//! ```text
//! [convergence]
//! domain = -5,5,-5,5
//! meshes = 10,20,40,80
//! dt = match_dx
//! t_max = 5
//! epsilon = 1e-4,1e-2,1
//! ```

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::grid::InitialCondition;
use crate::scheme::SchemeOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Run,
    Convergence,
    Asymptotic,
    Energy,
    BlowupRadial,
    BlowupCartesian,
    SteadySubcritical,
    TwoSpecies,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Run,
        Kind::Convergence,
        Kind::Asymptotic,
        Kind::Energy,
        Kind::BlowupRadial,
        Kind::BlowupCartesian,
        Kind::SteadySubcritical,
        Kind::TwoSpecies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Run => "run",
            Kind::Convergence => "convergence",
            Kind::Asymptotic => "asymptotic",
            Kind::Energy => "energy",
            Kind::BlowupRadial => "blowup_radial",
            Kind::BlowupCartesian => "blowup_cartesian",
            Kind::SteadySubcritical => "steady_subcritical",
            Kind::TwoSpecies => "two_species",
        }
    }

    pub fn from_name(name: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// How the time step follows from the mesh spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtRule {
    MatchDx,
    /// `dt = dx / K`
    DxOver(f64),
    Absolute(f64),
}

impl DtRule {
    pub fn dt(self, dx: f64) -> f64 {
        match self {
            DtRule::MatchDx => dx,
            DtRule::DxOver(k) => dx / k,
            DtRule::Absolute(dt) => dt,
        }
    }

    /// Step count and step size covering `[0, t_max]` exactly, with the
    /// step no larger than the rule asks for.
    pub fn schedule(self, dx: f64, t_max: f64) -> (usize, f64) {
        let nominal = self.dt(dx);
        let ratio = t_max / nominal;
        // tolerate rounding in t_max / dt before taking the ceiling
        let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0) {
            ratio.round()
        } else {
            ratio.ceil()
        }
        .max(1.0) as usize;
        (steps, t_max / steps as f64)
    }

    pub fn label(self) -> String {
        match self {
            DtRule::MatchDx => "match_dx".into(),
            DtRule::DxOver(k) => format!("dx_over_{k}"),
            DtRule::Absolute(dt) => format!("{dt}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Cartesian,
    Radial,
}

/// Stepper for `m > 1` on the cartesian grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    SemiImplicit,
    Newton,
}

/// Initial concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConcInit {
    Zero,
    /// Half the initial density.
    HalfRho,
    Gaussian { amplitude: f64, rate: f64 },
    /// Quasi-static concentration of the initial density: the gauged
    /// periodic Poisson potential on the cartesian grid, the screened Poisson
    /// solution on the radial one.
    Elliptic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub geometry: Geometry,
    /// `(a, b, c, d)` for `[a, b] x [c, d]`.
    pub domain: (f64, f64, f64, f64),
    /// Outer radius of the radial domain.
    pub radius: f64,
    /// Cells per side (cartesian, with `ny` scaled from the aspect ratio
    /// unless given) or radial cell count.
    pub meshes: Vec<usize>,
    pub ny: Option<usize>,
    pub dt: Vec<DtRule>,
    pub t_max: f64,
    pub epsilon: Vec<f64>,
    pub m: Vec<f64>,
    pub orders: Vec<SchemeOrder>,
    pub stepper: Stepper,
    pub ic: InitialCondition,
    pub conc: ConcInit,
    pub chi: [f64; 2],
    pub mu: [f64; 2],
    pub alpha: [f64; 2],
    pub beta: f64,
    pub diffusion: f64,
    pub out_dir: Option<PathBuf>,
    pub snapshots: Vec<f64>,
    /// Keep every `stride`-th step in the time series, plus the last one.
    pub stride: usize,
}

impl ExperimentSpec {
    /// The study settings for `kind` before any keys are applied.
    pub fn defaults(kind: Kind) -> Self {
        let mut spec = ExperimentSpec {
            kind,
            geometry: Geometry::Cartesian,
            domain: (-5.0, 5.0, -5.0, 5.0),
            radius: 2.0,
            meshes: vec![40],
            ny: None,
            dt: vec![DtRule::MatchDx],
            t_max: 1.0,
            epsilon: vec![0.0],
            m: vec![1.0],
            orders: vec![SchemeOrder::First],
            stepper: Stepper::SemiImplicit,
            ic: InitialCondition::Gaussian {
                amplitude: 4.0,
                rate: 1.0,
            },
            conc: ConcInit::Zero,
            chi: [1.0, 1.0],
            mu: [1.0, 1.0],
            alpha: [1.0, 1.0],
            beta: 1.0,
            diffusion: 1.0,
            out_dir: None,
            snapshots: Vec::new(),
            stride: 1,
        };
        match kind {
            Kind::Run => {}
            Kind::Convergence => {
                spec.meshes = vec![10, 20, 40, 80];
                spec.t_max = 5.0;
                spec.epsilon = vec![1e-4, 1e-2, 1.0];
                spec.conc = ConcInit::Gaussian {
                    amplitude: 1.0,
                    rate: 0.5,
                };
            }
            Kind::Asymptotic | Kind::Energy => {
                spec.domain = (-1.0, 1.0, -1.0, 1.0);
                spec.ic = InitialCondition::Gaussian {
                    amplitude: 400.0,
                    rate: 100.0,
                };
                spec.conc = ConcInit::Gaussian {
                    amplitude: 1.0,
                    rate: 50.0,
                };
                if kind == Kind::Asymptotic {
                    spec.dt = vec![DtRule::Absolute(0.05), DtRule::Absolute(5e-4)];
                    spec.epsilon = vec![1e-1, 1e-2, 1e-3];
                } else {
                    spec.dt = vec![DtRule::Absolute(0.05)];
                    spec.t_max = 5.0;
                    spec.epsilon = vec![0.0, 1.0];
                }
            }
            Kind::BlowupRadial => {
                spec.geometry = Geometry::Radial;
                spec.meshes = vec![80, 320];
                spec.dt = vec![DtRule::DxOver(5.0)];
                spec.t_max = 0.5;
                spec.ic = InitialCondition::Gaussian {
                    amplitude: 600.0,
                    rate: 60.0,
                };
                spec.conc = ConcInit::Elliptic;
            }
            Kind::BlowupCartesian => {
                spec.domain = (-4.0, 4.0, -4.0, 4.0);
                spec.meshes = vec![40, 160];
                spec.dt = vec![DtRule::DxOver(20.0)];
                spec.t_max = 0.2;
                spec.ic = InitialCondition::Gaussian {
                    amplitude: 600.0,
                    rate: 60.0,
                };
                spec.conc = ConcInit::Gaussian {
                    amplitude: 300.0,
                    rate: 30.0,
                };
            }
            Kind::SteadySubcritical => {
                spec.geometry = Geometry::Radial;
                spec.meshes = vec![40];
                spec.dt = vec![DtRule::Absolute(1.5e-5)];
                spec.t_max = 50.0;
                spec.m = vec![4.0, 16.0, 64.0];
                spec.ic = InitialCondition::IndicatorDisc {
                    value: 1.0,
                    r2_max: 0.1,
                };
                spec.conc = ConcInit::HalfRho;
                spec.snapshots = vec![0.0, 50.0];
                spec.stride = 10_000;
            }
            Kind::TwoSpecies => {
                spec.domain = (-3.0, 3.0, -3.0, 3.0);
                spec.meshes = vec![100, 200];
                spec.dt = vec![DtRule::DxOver(10.0)];
                spec.t_max = 0.05;
                spec.chi = [1.0, 20.0];
                spec.ic = InitialCondition::Gaussian {
                    amplitude: 50.0,
                    rate: 100.0,
                };
            }
        }
        spec
    }

    fn apply_cartesian_steady_defaults(&mut self) {
        self.domain = (-2.0, 2.0, -2.0, 2.0);
        self.meshes = vec![64];
        self.dt = vec![DtRule::Absolute(1.25e-4)];
        self.t_max = 10.0;
        self.m = vec![64.0];
        self.ic = InitialCondition::double_annulus(1.0);
        self.snapshots = vec![0.0, 4.0, 10.0];
        self.stride = 100;
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c, d) = self.domain;
        if !(a < b && c < d && [a, b, c, d].iter().all(|v| v.is_finite())) {
            return Err(Error::param("domain", "needs a < b and c < d"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::param("radius", "must be positive"));
        }
        if self.meshes.is_empty() || self.meshes.iter().any(|&n| n < 2) {
            return Err(Error::param("meshes", "needs at least one mesh of 2 or more cells"));
        }
        if self.ny == Some(0) || self.ny == Some(1) {
            return Err(Error::param("ny", "must be at least 2"));
        }
        if self.dt.is_empty() {
            return Err(Error::param("dt", "needs at least one rule"));
        }
        for rule in &self.dt {
            let v = match rule {
                DtRule::MatchDx => 1.0,
                DtRule::DxOver(k) | DtRule::Absolute(k) => *k,
            };
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param("dt", "must be positive"));
            }
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::param("t_max", "must be positive"));
        }
        if self.epsilon.is_empty() || self.epsilon.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::param("epsilon", "values must be finite and >= 0"));
        }
        if self.m.is_empty() || self.m.iter().any(|m| !(*m >= 1.0 && m.is_finite())) {
            return Err(Error::param("m", "values must be finite and >= 1"));
        }
        if self.kind == Kind::SteadySubcritical && self.m.iter().any(|&m| m == 1.0) {
            return Err(Error::param("m", "steady_subcritical needs m > 1"));
        }
        if self.orders.is_empty() {
            return Err(Error::param("order", "needs at least one order"));
        }
        let positive = [
            ("chi", self.chi[0].min(self.chi[1])),
            ("mu", self.mu[0].min(self.mu[1])),
            ("alpha", self.alpha[0].min(self.alpha[1])),
            ("beta", self.beta),
            ("diffusion", self.diffusion),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if self.snapshots.iter().any(|t| !(*t >= 0.0 && *t <= self.t_max)) {
            return Err(Error::param("snapshots", "times must lie in [0, t_max]"));
        }
        if self.geometry == Geometry::Radial {
            if matches!(self.ic, InitialCondition::IndicatorTwoBump { .. }) {
                return Err(Error::param("ic", "two_bump is not radially symmetric"));
            }
            if matches!(self.kind, Kind::BlowupCartesian | Kind::TwoSpecies | Kind::Convergence | Kind::Asymptotic | Kind::Energy) {
                return Err(Error::param("geometry", "this study runs on the cartesian grid"));
            }
        }
        Ok(())
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn number(e: &Entry) -> Result<f64> {
    e.value
        .trim()
        .parse::<f64>()
        .map_err(|_| config_err(e.line, format!("key `{}`: cannot parse `{}` as a number", e.key, e.value)))
}

fn numbers(e: &Entry) -> Result<Vec<f64>> {
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| config_err(e.line, format!("key `{}`: cannot parse `{}` as a number", e.key, s.trim())))
        })
        .collect()
}

fn count(e: &Entry) -> Result<usize> {
    e.value
        .trim()
        .parse::<usize>()
        .map_err(|_| config_err(e.line, format!("key `{}`: cannot parse `{}` as a count", e.key, e.value)))
}

fn counts(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| config_err(e.line, format!("key `{}`: cannot parse `{}` as a count", e.key, s.trim())))
        })
        .collect()
}

fn pair(e: &Entry) -> Result<[f64; 2]> {
    let v = numbers(e)?;
    match v.as_slice() {
        [x] => Ok([*x, *x]),
        [x, y] => Ok([*x, *y]),
        _ => Err(config_err(e.line, format!("key `{}`: expected one or two values", e.key))),
    }
}

fn dt_rule(e: &Entry, s: &str) -> Result<DtRule> {
    let s = s.trim();
    if s == "match_dx" {
        return Ok(DtRule::MatchDx);
    }
    if let Some(k) = s.strip_prefix("dx_over_") {
        return k
            .parse::<f64>()
            .map(DtRule::DxOver)
            .map_err(|_| config_err(e.line, format!("key `dt`: cannot parse `{k}` as a number")));
    }
    s.parse::<f64>()
        .map(DtRule::Absolute)
        .map_err(|_| config_err(e.line, format!("key `dt`: expected match_dx, dx_over_K or a number, got `{s}`")))
}

/// Parses and validates one experiment section. Keys missing from the file
/// take the study's settings from [`ExperimentSpec::defaults`].
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let mut kind: Option<(Kind, usize)> = None;
    let mut entries: Vec<Entry> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if kind.is_some() {
                return Err(config_err(line, "only one section per file"));
            }
            let name = name.trim();
            let parsed = Kind::from_name(name).ok_or_else(|| config_err(line, format!("unknown section `{name}`")))?;
            kind = Some((parsed, line));
            continue;
        }
        if kind.is_none() {
            return Err(config_err(line, "missing section: expected `[kind]` before keys"));
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        if entries.iter().any(|e| e.key == key) {
            return Err(config_err(line, format!("key `{key}` given twice")));
        }
        entries.push(Entry {
            line,
            key,
            value: value.trim(),
        });
    }
    let (kind, section_line) = kind.ok_or_else(|| config_err(0, "missing section"))?;

    let mut spec = ExperimentSpec::defaults(kind);
    let find = |key: &str| entries.iter().find(|e| e.key == key);

    if kind == Kind::Run {
        for required in ["ic", "t_max"] {
            if find(required).is_none() {
                return Err(config_err(section_line, format!("missing required key `{required}`")));
            }
        }
    }

    // geometry decides the remaining defaults, so it goes first
    if let Some(e) = find("geometry") {
        spec.geometry = match e.value {
            "cartesian" => Geometry::Cartesian,
            "radial" => Geometry::Radial,
            other => return Err(config_err(e.line, format!("key `geometry`: unknown value `{other}`"))),
        };
        if kind == Kind::SteadySubcritical && spec.geometry == Geometry::Cartesian {
            spec.apply_cartesian_steady_defaults();
        }
    }

    let mut ic_params: Vec<&Entry> = Vec::new();
    let mut conc_params: Vec<&Entry> = Vec::new();
    for e in &entries {
        match e.key {
            "geometry" => {}
            "domain" => {
                let v = numbers(e)?;
                spec.domain = match v.as_slice() {
                    [lo, hi] => (*lo, *hi, *lo, *hi),
                    [a, b, c, d] => (*a, *b, *c, *d),
                    _ => return Err(config_err(e.line, "key `domain`: expected lo,hi or a,b,c,d")),
                };
            }
            "radius" => spec.radius = number(e)?,
            "meshes" => spec.meshes = counts(e)?,
            "nx" | "nr" => spec.meshes = vec![count(e)?],
            "ny" => spec.ny = Some(count(e)?),
            "dt" => spec.dt = e.value.split(',').map(|s| dt_rule(e, s)).collect::<Result<_>>()?,
            "t_max" => spec.t_max = number(e)?,
            "epsilon" => spec.epsilon = numbers(e)?,
            "m" => spec.m = numbers(e)?,
            "order" => {
                spec.orders = e
                    .value
                    .split(',')
                    .map(|s| match s.trim() {
                        "first" => Ok(SchemeOrder::First),
                        "bdf2" | "second" => Ok(SchemeOrder::Bdf2),
                        other => Err(config_err(e.line, format!("key `order`: unknown value `{other}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "scheme" => {
                spec.stepper = match e.value {
                    "semi_implicit" => Stepper::SemiImplicit,
                    "newton" => Stepper::Newton,
                    other => return Err(config_err(e.line, format!("key `scheme`: unknown value `{other}`"))),
                }
            }
            "ic" | "amplitude" | "rate" | "value" | "r2_max" => ic_params.push(e),
            "conc" | "conc_amplitude" | "conc_rate" => conc_params.push(e),
            "chi" => spec.chi = pair(e)?,
            "mu" => spec.mu = pair(e)?,
            "alpha" => spec.alpha = pair(e)?,
            "beta" => spec.beta = number(e)?,
            "diffusion" => spec.diffusion = number(e)?,
            "out_dir" => spec.out_dir = Some(PathBuf::from(e.value)),
            "snapshots" => {
                spec.snapshots = if e.value.is_empty() {
                    Vec::new()
                } else {
                    numbers(e)?
                }
            }
            "stride" => spec.stride = count(e)?,
            other => return Err(config_err(e.line, format!("unknown key `{other}`"))),
        }
    }
    spec.ic = parse_ic(&spec.ic, &ic_params)?;
    spec.conc = parse_conc(spec.conc, &conc_params)?;

    let line_of = |key: &str| find(key).map(|e| e.line).unwrap_or(section_line);
    spec.validate().map_err(|err| match err {
        Error::InvalidParameter { name, reason } => {
            config_err(line_of(name), format!("key `{name}`: {reason}"))
        }
        other => other,
    })?;
    Ok(spec)
}

fn parse_ic(default: &InitialCondition, params: &[&Entry]) -> Result<InitialCondition> {
    let get = |key: &str| params.iter().find(|e| e.key == key);
    let shape = match get("ic") {
        Some(e) => e,
        None => {
            // parameters without a shape adjust the default one
            let mut ic = default.clone();
            for e in params {
                let v = number(e)?;
                match (&mut ic, e.key) {
                    (InitialCondition::Gaussian { amplitude, .. }, "amplitude") => *amplitude = v,
                    (InitialCondition::Gaussian { rate, .. }, "rate") => *rate = v,
                    (InitialCondition::IndicatorDisc { r2_max, .. }, "r2_max") => *r2_max = v,
                    (
                        InitialCondition::IndicatorDisc { value, .. }
                        | InitialCondition::IndicatorAnnuli { value, .. }
                        | InitialCondition::IndicatorTwoBump { value, .. },
                        "value",
                    ) => *value = v,
                    _ => return Err(config_err(e.line, format!("key `{}` does not apply to this ic", e.key))),
                }
            }
            return Ok(ic);
        }
    };
    let num = |key: &str, fallback: f64| get(key).map(|e| number(e)).unwrap_or(Ok(fallback));
    let allowed: &[&str] = match shape.value {
        "gaussian" => &["ic", "amplitude", "rate"],
        "disc" => &["ic", "value", "r2_max"],
        "double_annulus" | "two_bump" => &["ic", "value"],
        "zero" => &["ic"],
        other => return Err(config_err(shape.line, format!("key `ic`: unknown shape `{other}`"))),
    };
    if let Some(e) = params.iter().find(|e| !allowed.contains(&e.key)) {
        return Err(config_err(e.line, format!("key `{}` does not apply to ic `{}`", e.key, shape.value)));
    }
    Ok(match shape.value {
        "gaussian" => InitialCondition::Gaussian {
            amplitude: num("amplitude", 1.0)?,
            rate: num("rate", 1.0)?,
        },
        "disc" => InitialCondition::IndicatorDisc {
            value: num("value", 1.0)?,
            r2_max: num("r2_max", 0.1)?,
        },
        "double_annulus" => InitialCondition::double_annulus(num("value", 1.0)?),
        "two_bump" => InitialCondition::two_bump(num("value", 1.0)?),
        _ => InitialCondition::Gaussian {
            amplitude: 0.0,
            rate: 1.0,
        },
    })
}

fn parse_conc(default: ConcInit, params: &[&Entry]) -> Result<ConcInit> {
    let get = |key: &str| params.iter().find(|e| e.key == key);
    let mut conc = match get("conc") {
        None => default,
        Some(e) => match e.value {
            "zero" => ConcInit::Zero,
            "half_rho" => ConcInit::HalfRho,
            "elliptic" => ConcInit::Elliptic,
            "gaussian" => ConcInit::Gaussian {
                amplitude: 1.0,
                rate: 1.0,
            },
            other => return Err(config_err(e.line, format!("key `conc`: unknown value `{other}`"))),
        },
    };
    for e in params.iter().filter(|e| e.key != "conc") {
        let v = number(e)?;
        match (&mut conc, e.key) {
            (ConcInit::Gaussian { amplitude, .. }, "conc_amplitude") => *amplitude = v,
            (ConcInit::Gaussian { rate, .. }, "conc_rate") => *rate = v,
            _ => return Err(config_err(e.line, format!("key `{}` needs conc = gaussian", e.key))),
        }
    }
    if let ConcInit::Gaussian { amplitude, rate } = conc {
        if !(amplitude.is_finite() && rate > 0.0 && rate.is_finite()) {
            let line = get("conc_rate").or(get("conc_amplitude")).map(|e| e.line).unwrap_or(0);
            return Err(config_err(line, "key `conc_rate`: gaussian concentration needs a positive rate"));
        }
    }
    Ok(conc)
}
