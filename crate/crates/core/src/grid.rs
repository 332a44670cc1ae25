//! Uniform periodic cartesian grids, offset radial grids and the scalar
//! fields that live on them.
//!
//! Cartesian nodes sit at `x_i = a + i*dx` for `i = 0..nx`; the point `b`
//! is identified with `a`, so neighbor lookups wrap. Values are stored
//! row-major as `i + nx*j`.
//!
//! Radial nodes sit at `r_j = -dr/2 + j*dr` for `j = 0..=nr`. Index 0 is a
//! ghost node mirroring index 1, which encodes the zero-slope condition at
//! the origin.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

impl Grid2D {
    pub fn new(a: f64, b: f64, c: f64, d: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && c.is_finite() && d.is_finite()) {
            return Err(Error::InvalidGrid("domain bounds must be finite".into()));
        }
        if b <= a || d <= c {
            return Err(Error::InvalidGrid(format!(
                "non-positive extent: [{a}, {b}] x [{c}, {d}]"
            )));
        }
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 points per axis, got {nx} x {ny}"
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            nx,
            ny,
            dx: (b - a) / nx as f64,
            dy: (d - c) / ny as f64,
        })
    }

    /// Square domain `[lo, hi]^2` with `n` points per axis.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(lo, hi, lo, hi, n, n)
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.a, self.b, self.c, self.d)
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dy(&self) -> f64 {
        self.dy
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn x(&self, i: usize) -> f64 {
        self.a + i as f64 * self.dx
    }
    pub fn y(&self, j: usize) -> f64 {
        self.c + j as f64 * self.dy
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    #[inline]
    pub fn left(&self, i: usize) -> usize {
        if i == 0 {
            self.nx - 1
        } else {
            i - 1
        }
    }
    #[inline]
    pub fn right(&self, i: usize) -> usize {
        if i + 1 == self.nx {
            0
        } else {
            i + 1
        }
    }
    #[inline]
    pub fn down(&self, j: usize) -> usize {
        if j == 0 {
            self.ny - 1
        } else {
            j - 1
        }
    }
    #[inline]
    pub fn up(&self, j: usize) -> usize {
        if j + 1 == self.ny {
            0
        } else {
            j + 1
        }
    }

    /// True when `fine` refines `self` by an integer factor on the same
    /// domain, so every node of `self` is also a node of `fine`.
    pub fn refinement_factor(&self, fine: &Grid2D) -> Option<usize> {
        if self.bounds() != fine.bounds() || fine.nx % self.nx != 0 || fine.ny % self.ny != 0 {
            return None;
        }
        let k = fine.nx / self.nx;
        (fine.ny / self.ny == k).then_some(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            let y = grid.y(j);
            for i in 0..grid.nx {
                values.push(f(grid.x(i), y));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i, j);
        self.values[k] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Values along the row `j`, i.e. the slice `y = y_j`.
    pub fn row(&self, j: usize) -> &[f64] {
        let start = self.grid.idx(0, j);
        &self.values[start..start + self.grid.nx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialGrid {
    length: f64,
    nr: usize,
    dr: f64,
}

impl RadialGrid {
    pub fn new(length: f64, nr: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "outer radius must be positive, got {length}"
            )));
        }
        if nr < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 radial points, got {nr}"
            )));
        }
        Ok(Self {
            length,
            nr,
            dr: length / nr as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn nr(&self) -> usize {
        self.nr
    }
    pub fn dr(&self) -> f64 {
        self.dr
    }
    /// Number of stored values, ghost included.
    pub fn len(&self) -> usize {
        self.nr + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    #[inline]
    pub fn r(&self, j: usize) -> f64 {
        -0.5 * self.dr + j as f64 * self.dr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialField {
    grid: RadialGrid,
    values: Vec<f64>,
}

impl RadialField {
    pub fn zeros(grid: RadialGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: RadialGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f` at `r_1..r_nr` and mirrors the ghost.
    pub fn from_fn(grid: RadialGrid, f: impl Fn(f64) -> f64) -> Self {
        let mut values: Vec<f64> = (0..grid.len()).map(|j| f(grid.r(j))).collect();
        values[0] = values[1];
        Self { grid, values }
    }

    pub fn from_values(grid: RadialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} radial values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    /// Values at `r_1..r_nr`, ghost excluded.
    pub fn interior(&self) -> &[f64] {
        &self.values[1..]
    }

    pub fn enforce_ghost(&mut self) {
        self.values[0] = self.values[1];
    }

    pub fn max(&self) -> f64 {
        self.interior()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min(&self) -> f64 {
        self.interior().iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Linear interpolation in `r`, clamped to `[r_1, r_nr]`.
    pub fn interpolate(&self, r: f64) -> f64 {
        let g = &self.grid;
        let s = (r - g.r(1)) / g.dr;
        if s <= 0.0 {
            return self.values[1];
        }
        let k = s.floor() as usize + 1;
        if k >= g.nr {
            return self.values[g.nr];
        }
        let w = s - (k - 1) as f64;
        (1.0 - w) * self.values[k] + w * self.values[k + 1]
    }
}

/// Initial data used by the experiment drivers. All shapes are centered at
/// the origin.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// `amplitude * exp(-rate * (x^2 + y^2))`
    Gaussian { amplitude: f64, rate: f64 },
    /// `value` where `r^2 <= r2_max`, zero elsewhere.
    IndicatorDisc { value: f64, r2_max: f64 },
    /// `value` on the open bands `lo < r^2 < hi`.
    IndicatorAnnuli { value: f64, bands: Vec<(f64, f64)> },
    /// `value` on closed axis-aligned rectangles `(x0, x1, y0, y1)`.
    IndicatorTwoBump {
        value: f64,
        rects: Vec<(f64, f64, f64, f64)>,
    },
}

impl InitialCondition {
    /// The two-rectangle layout used for the non-symmetric subcritical run.
    pub fn two_bump(value: f64) -> Self {
        InitialCondition::IndicatorTwoBump {
            value,
            rects: vec![(-1.0, -0.1, 0.1, 1.0), (0.0, 1.0, -1.0, 0.0)],
        }
    }

    /// The double annulus `0.5 < r^2 < 1` or `1.5 < r^2 < 2`.
    pub fn double_annulus(value: f64) -> Self {
        InitialCondition::IndicatorAnnuli {
            value,
            bands: vec![(0.5, 1.0), (1.5, 2.0)],
        }
    }

    fn validate(&self) -> Result<()> {
        let (name, amp) = match self {
            InitialCondition::Gaussian { amplitude, rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::param("rate", format!("must be positive, got {rate}")));
                }
                ("amplitude", *amplitude)
            }
            InitialCondition::IndicatorDisc { value, .. }
            | InitialCondition::IndicatorAnnuli { value, .. }
            | InitialCondition::IndicatorTwoBump { value, .. } => ("value", *value),
        };
        if !(amp.is_finite() && amp >= 0.0) {
            return Err(Error::param(name, format!("must be nonnegative, got {amp}")));
        }
        Ok(())
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let r2 = x * x + y * y;
        match self {
            InitialCondition::Gaussian { amplitude, rate } => amplitude * (-rate * r2).exp(),
            InitialCondition::IndicatorDisc { value, r2_max } => {
                if r2 <= *r2_max {
                    *value
                } else {
                    0.0
                }
            }
            InitialCondition::IndicatorAnnuli { value, bands } => {
                if bands.iter().any(|&(lo, hi)| lo < r2 && r2 < hi) {
                    *value
                } else {
                    0.0
                }
            }
            InitialCondition::IndicatorTwoBump { value, rects } => {
                if rects
                    .iter()
                    .any(|&(x0, x1, y0, y1)| x0 <= x && x <= x1 && y0 <= y && y <= y1)
                {
                    *value
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample_cartesian(&self, grid: Grid2D) -> Result<Field2D> {
        self.validate()?;
        Ok(Field2D::from_fn(grid, |x, y| self.eval(x, y)))
    }

    pub fn sample_radial(&self, grid: RadialGrid) -> Result<RadialField> {
        self.validate()?;
        if matches!(self, InitialCondition::IndicatorTwoBump { .. }) {
            return Err(Error::param(
                "ic",
                "indicator_twobump is not radially symmetric",
            ));
        }
        Ok(RadialField::from_fn(grid, |r| self.eval(r, 0.0)))
    }
}

/// Centered-difference gradient at node `(i, j)` with periodic wrap.
#[inline]
pub fn centered_gradient(f: &Field2D, i: usize, j: usize) -> (f64, f64) {
    let g = f.grid();
    let gx = (f.get(g.right(i), j) - f.get(g.left(i), j)) / (2.0 * g.dx());
    let gy = (f.get(i, g.up(j)) - f.get(i, g.down(j))) / (2.0 * g.dy());
    (gx, gy)
}

/// `sum |grad_h f|^2 dx dy` with centered differences.
pub fn gradient_energy(f: &Field2D) -> f64 {
    let g = f.grid();
    let mut acc = 0.0;
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let (gx, gy) = centered_gradient(f, i, j);
            acc += gx * gx + gy * gy;
        }
    }
    acc * g.cell_area()
}

/// Discrete `L^2` norm of the gradient: `sqrt(sum |grad_h f|^2 dx dy)`.
pub fn discrete_gradient_l2(f: &Field2D) -> f64 {
    gradient_energy(f).sqrt()
}
