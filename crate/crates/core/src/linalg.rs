//! Linear solvers behind the implicit steps: matrix-free (preconditioned)
//! conjugate gradients for SPD stencil operators, BiCGSTAB for the
//! nonsymmetric Newton Jacobians, and Thomas elimination for the radial
//! tridiagonal systems.

use crate::error::{Error, Result};

/// A square linear map applied without assembling a matrix.
pub trait LinearOperator {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// Matrix diagonal, when cheaply available. Enables Jacobi scaling.
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
    /// `|| |A| |x| ||`, used to bound rounding in residuals.
    fn magnitude(&self, x: &[f64]) -> Option<f64> {
        let d = self.diagonal()?;
        Some(2.0 * d.iter().zip(x).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt())
    }
}

/// Wraps a closure `(x, y) -> y = A x` as an operator.
pub struct FnOperator<F> {
    size: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnOperator<F> {
    pub fn new(size: usize, f: F) -> Self {
        Self { size, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> LinearOperator for FnOperator<F> {
    fn size(&self) -> usize {
        self.size
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

/// Row-major dense matrix. Only meant for small systems.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    n: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "dense operator must be square");
            data.extend_from_slice(r);
        }
        Self { n, data }
    }
}

impl LinearOperator for DenseOperator {
    fn size(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(&self.data[i * self.n..(i + 1) * self.n], x);
        }
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some((0..self.n).map(|i| self.data[i * self.n + i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Relative residual target `||b - A x|| <= tol ||b||`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    pub max_iter: Option<usize>,
    pub jacobi: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            jacobi: false,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn cap(&self, n: usize) -> usize {
        self.max_iter.unwrap_or(10 * n.max(1))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::param("tol", format!("must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual.
    pub residual: f64,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn true_residual(op: &dyn LinearOperator, x: &[f64], b: &[f64], r: &mut [f64]) {
    op.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Residual norm below which rounding dominates: a small multiple of
/// `eps * sqrt(n) * (||b|| + || |A| |x| ||)`.
fn rounding_floor(op: &dyn LinearOperator, x: &[f64], b_norm: f64) -> f64 {
    16.0 * f64::EPSILON * (x.len() as f64).sqrt() * (b_norm + op.magnitude(x).unwrap_or(0.0))
}

fn inverse_diagonal(op: &dyn LinearOperator, jacobi: bool) -> Result<Option<Vec<f64>>> {
    if !jacobi {
        return Ok(None);
    }
    let Some(d) = op.diagonal() else {
        return Ok(None);
    };
    if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::NonFinite("Jacobi preconditioner diagonal"));
    }
    Ok(Some(d.iter().map(|v| 1.0 / v).collect()))
}

/// Conjugate gradients from a zero initial guess.
pub fn cg_solve(op: &dyn LinearOperator, rhs: &[f64], settings: &SolverSettings) -> Result<Solution> {
    cg_solve_from(op, rhs, vec![0.0; rhs.len()], settings)
}

/// Conjugate gradients from the initial guess `x0`.
///
/// Convergence is declared on the recursively updated residual and then
/// confirmed against the true residual; if they disagree the iteration
/// restarts from the current iterate.
pub fn cg_solve_from(
    op: &dyn LinearOperator,
    rhs: &[f64],
    x0: Vec<f64>,
    settings: &SolverSettings,
) -> Result<Solution> {
    settings.validate()?;
    let n = op.size();
    assert_eq!(rhs.len(), n);
    assert_eq!(x0.len(), n);

    let b_norm = norm2(rhs);
    if !b_norm.is_finite() {
        return Err(Error::NonFinite("cg right-hand side"));
    }
    if b_norm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = settings.tol * b_norm;
    let cap = settings.cap(n);
    let inv_diag = inverse_diagonal(op, settings.jacobi)?;

    let mut x = x0;
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut iterations = 0;

    // a few restarts guard against drift between recursive and true residual
    for _restart in 0..4 {
        true_residual(op, &x, rhs, &mut r);
        let mut r_norm = norm2(&r);
        let target = target.max(rounding_floor(op, &x, b_norm));
        if r_norm <= target {
            return Ok(Solution {
                x,
                iterations,
                residual: r_norm / b_norm,
            });
        }
        precondition(&inv_diag, &r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);

        while iterations < cap {
            op.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !pq.is_finite() {
                return Err(Error::NonFinite("cg iteration"));
            }
            if pq <= 0.0 {
                // breakdown: operator not positive definite along p
                break;
            }
            let alpha = rz / pq;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * q[k];
            }
            iterations += 1;
            r_norm = norm2(&r);
            if !r_norm.is_finite() {
                return Err(Error::NonFinite("cg residual"));
            }
            if r_norm <= target {
                break;
            }
            precondition(&inv_diag, &r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        if iterations >= cap {
            break;
        }
    }

    true_residual(op, &x, rhs, &mut r);
    let rel = norm2(&r) / b_norm;
    if norm2(&r) <= target.max(rounding_floor(op, &x, b_norm)) {
        Ok(Solution {
            x,
            iterations,
            residual: rel,
        })
    } else {
        Err(Error::NotConverged {
            iterations,
            residual: rel,
        })
    }
}

fn precondition(inv_diag: &Option<Vec<f64>>, r: &[f64], z: &mut [f64]) {
    match inv_diag {
        Some(d) => {
            for ((zi, ri), di) in z.iter_mut().zip(r).zip(d) {
                *zi = ri * di;
            }
        }
        None => z.copy_from_slice(r),
    }
}

/// BiCGSTAB for nonsymmetric systems, from the initial guess `x0`.
pub fn bicgstab_solve(
    op: &dyn LinearOperator,
    rhs: &[f64],
    x0: Vec<f64>,
    settings: &SolverSettings,
) -> Result<Solution> {
    settings.validate()?;
    let n = op.size();
    let b_norm = norm2(rhs);
    if !b_norm.is_finite() {
        return Err(Error::NonFinite("bicgstab right-hand side"));
    }
    if b_norm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = settings.tol * b_norm;
    let cap = settings.cap(n);
    let inv_diag = inverse_diagonal(op, settings.jacobi)?;

    let mut x = x0;
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut iterations = 0;

    for _restart in 0..8 {
        true_residual(op, &x, rhs, &mut r);
        let target = target.max(rounding_floor(op, &x, b_norm));
        if norm2(&r) <= target {
            break;
        }
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        p.iter_mut().for_each(|e| *e = 0.0);

        while iterations < cap {
            let rho_new = dot(&r_hat, &r);
            if rho_new == 0.0 || !rho_new.is_finite() {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for k in 0..n {
                p[k] = r[k] + beta * (p[k] - omega * v[k]);
            }
            precondition(&inv_diag, &p, &mut phat);
            op.apply(&phat, &mut v);
            let rv = dot(&r_hat, &v);
            if rv == 0.0 || !rv.is_finite() {
                break;
            }
            alpha = rho / rv;
            for k in 0..n {
                s[k] = r[k] - alpha * v[k];
            }
            iterations += 1;
            if norm2(&s) <= target {
                for k in 0..n {
                    x[k] += alpha * phat[k];
                }
                r.copy_from_slice(&s);
                break;
            }
            precondition(&inv_diag, &s, &mut shat);
            op.apply(&shat, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 || !tt.is_finite() {
                break;
            }
            omega = dot(&t, &s) / tt;
            for k in 0..n {
                x[k] += alpha * phat[k] + omega * shat[k];
                r[k] = s[k] - omega * t[k];
            }
            if norm2(&r) <= target || omega == 0.0 {
                break;
            }
        }
        if iterations >= cap {
            break;
        }
    }

    true_residual(op, &x, rhs, &mut r);
    let rel = norm2(&r) / b_norm;
    if !rel.is_finite() {
        return Err(Error::NonFinite("bicgstab solution"));
    }
    if norm2(&r) <= target.max(rounding_floor(op, &x, b_norm)) {
        Ok(Solution {
            x,
            iterations,
            residual: rel,
        })
    } else {
        Err(Error::NotConverged {
            iterations,
            residual: rel,
        })
    }
}

/// Square band matrix with half-bandwidth `w`, factorized in place without
/// pivoting. Meant for column diagonally dominant systems, where elimination
/// without pivoting is stable.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, w: usize) -> Self {
        Self {
            n,
            w,
            data: vec![0.0; n * (2 * w + 1)],
        }
    }

    /// Storage needed for an `n` by `n` matrix of half-bandwidth `w`.
    pub fn storage(n: usize, w: usize) -> usize {
        n * (2 * w + 1)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.w);
        i * (2 * self.w + 1) + j + self.w - i
    }

    /// Adds `v` at `(i, j)`; panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i.abs_diff(j) <= self.w, "entry ({i}, {j}) outside the band");
        let k = self.at(i, j);
        self.data[k] += v;
    }

    /// LU factorization followed by the two triangular solves.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (n, w) = (self.n, self.w);
        assert_eq!(rhs.len(), n);
        for k in 0..n {
            let pivot = self.data[self.at(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::ZeroPivot { row: k });
            }
            let last = (k + w).min(n - 1);
            for i in k + 1..=last {
                let ik = self.at(i, k);
                let l = self.data[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                for j in k + 1..=last {
                    let (ij, kj) = (self.at(i, j), self.at(k, j));
                    self.data[ij] -= l * self.data[kj];
                }
            }
        }
        let mut x = rhs.to_vec();
        for i in 0..n {
            let first = i.saturating_sub(w);
            let s: f64 = (first..i).map(|j| self.data[self.at(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let last = (i + w).min(n - 1);
            let s: f64 = (i + 1..=last).map(|j| self.data[self.at(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.data[self.at(i, i)];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("band solve"));
        }
        Ok(x)
    }
}

/// `sub[k]` couples row `k+1` to column `k`; `sup[k]` couples row `k` to
/// column `k+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `A x` for residual checks.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.sub[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Thomas elimination without pivoting.
pub fn tridiag_solve(sys: &TridiagonalSystem) -> Result<Vec<f64>> {
    let n = sys.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if sys.sub.len() + 1 != n || sys.sup.len() + 1 != n || sys.rhs.len() != n {
        return Err(Error::param(
            "tridiagonal",
            format!(
                "inconsistent lengths: sub {}, diag {}, sup {}, rhs {}",
                sys.sub.len(),
                n,
                sys.sup.len(),
                sys.rhs.len()
            ),
        ));
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = sys.diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::ZeroPivot { row: 0 });
    }
    if n > 1 {
        c[0] = sys.sup[0] / pivot;
    }
    d[0] = sys.rhs[0] / pivot;
    for i in 1..n {
        pivot = sys.diag[i] - sys.sub[i - 1] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::ZeroPivot { row: i });
        }
        if i + 1 < n {
            c[i] = sys.sup[i] / pivot;
        }
        d[i] = (sys.rhs[i] - sys.sub[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tridiagonal solution"));
    }
    Ok(d)
}
