//! Uniform convolution grid, quadrature rule, and the impulse-response tables
//! `h_E` (sum of self-convolutions of the censored-column kernel) and `H_E`
//! (its integral), together with their parameter derivatives.
//!
//! Every convolution uses the rule
//! `(f * g)(t) ≈ Σ_{t_i < t} [F(t - t_i) - F(t - min(t_{i+1}, t))] · g(t_i)`
//! with `F` the antiderivative of `f`. For an exponential `f` on a uniform
//! grid the weights are geometric in the lag, so a full-grid convolution is a
//! first-order linear recursion and costs `O(P)` instead of `O(P²)`.

use crate::error::{PmbpError, Result};
use crate::model::{check_subcriticality, Matrix, ModelParams, ParamId};

/// Maximum number of series terms before giving up.
pub const MAX_TERMS: usize = 1000;

/// Default truncation threshold for the impulse-response series.
pub const DEFAULT_GAMMA_H: f64 = 1e-6;

/// Uniform partition `t_p = p·step`, `p = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGrid {
    /// Spacing between points.
    pub step: f64,
    /// Index of the last point.
    pub n: usize,
}

impl ConvGrid {
    /// Grid with the given step and last index.
    pub fn new(step: f64, n: usize) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) || n == 0 {
            return Err(PmbpError::Domain(format!("invalid grid (step {step}, n {n})")));
        }
        Ok(ConvGrid { step, n })
    }

    /// Smallest grid with spacing `step` whose last point is at least `horizon`.
    pub fn covering(horizon: f64, step: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(PmbpError::Domain(format!("grid horizon {horizon} must be positive")));
        }
        let n = (horizon / step - 1e-9).ceil().max(1.0) as usize;
        Self::new(step, n)
    }

    /// Default spacing: one hundredth of the shortest kernel time scale,
    /// clamped to `[T/1e5, T/100]`.
    pub fn default_for(params: &ModelParams, horizon: f64) -> Result<Self> {
        let max_theta = params.theta.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let step = (0.01 / max_theta).clamp(horizon / 1e5, horizon / 100.0);
        Self::covering(horizon, step)
    }

    /// Time of point `p`.
    pub fn t(&self, p: usize) -> f64 {
        p as f64 * self.step
    }

    /// Time of the last point.
    pub fn horizon(&self) -> f64 {
        self.t(self.n)
    }

    /// Cell index `m` and fractional offset `w ∈ [0, 1)` with `x = (m + w)·step`;
    /// values within 1e-9 (relative) of a node snap to it with `w = 0`.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let q = (x / self.step).max(0.0);
        let r = q.round();
        if (q - r).abs() <= 1e-9 * r.max(1.0) {
            (r as usize, 0.0)
        } else {
            (q.floor() as usize, q - q.floor())
        }
    }

    /// Index of `t` if it lies on the grid (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.step;
        let r = x.round();
        ((x - r).abs() <= 1e-9 * r.max(1.0) && r >= 0.0 && r as usize <= self.n).then_some(r as usize)
    }
}

/// Quadrature of `f * g` at grid point `t`, with `F` the antiderivative of `f`
/// (`F(0) = 0`) and `g` sampled on the grid; matrix products `F · g`.
pub fn conv_quadrature(
    f_int: &dyn Fn(f64) -> Matrix,
    g: &[Matrix],
    grid: &ConvGrid,
    t: f64,
) -> Result<Matrix> {
    let p = grid.index_of(t).ok_or_else(|| PmbpError::Domain(format!("t = {t} is not a grid point")))?;
    if g.len() < p {
        return Err(PmbpError::Dimension(format!("g has {} samples, need {p}", g.len())));
    }
    let t = grid.t(p);
    let (rows, cols) = match g.first() {
        Some(g0) => (f_int(0.0).len(), g0.first().map_or(0, Vec::len)),
        None => return Ok(Vec::new()),
    };
    let mut out = vec![vec![0.0; cols]; rows];
    for (i, gi) in g.iter().enumerate().take(p) {
        let a = f_int(t - grid.t(i));
        let b = f_int(t - grid.t(i + 1).min(t));
        for r in 0..rows {
            for c in 0..cols {
                out[r][c] += (0..gi.len()).map(|k| (a[r][k] - b[r][k]) * gi[k][c]).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// Variant of [`conv_quadrature`] that weights each cell by the average of
/// `g` at its two ends instead of the left value; second-order accurate.
///
/// Used for the self-convolutions building `h_E`, where the left-endpoint
/// bias would compound once per series order.
pub fn conv_quadrature_averaged(
    f_int: &dyn Fn(f64) -> Matrix,
    g: &[Matrix],
    grid: &ConvGrid,
    t: f64,
) -> Result<Matrix> {
    let p = grid.index_of(t).ok_or_else(|| PmbpError::Domain(format!("t = {t} is not a grid point")))?;
    if g.len() <= p {
        return Err(PmbpError::Dimension(format!("g has {} samples, need {}", g.len(), p + 1)));
    }
    let avg: Vec<Matrix> = (0..p)
        .map(|i| g[i].iter().zip(&g[i + 1]).map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()).collect())
        .collect();
    conv_quadrature(f_int, &avg, grid, grid.t(p))
}

/// Scalar form of [`conv_quadrature`].
pub fn conv_quadrature_scalar(f_int: &dyn Fn(f64) -> f64, g: &[f64], grid: &ConvGrid, t: f64) -> Result<f64> {
    let gm: Vec<Matrix> = g.iter().map(|&x| vec![vec![x]]).collect();
    Ok(conv_quadrature(&|s| vec![vec![f_int(s)]], &gm, grid, t)?[0][0])
}

/// Grid arrays with `d` rows and `e` censored columns per point, flattened
/// as `((p · d) + i) · e + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridArray {
    d: usize,
    e: usize,
    /// Flattened values.
    pub data: Vec<f64>,
}

impl GridArray {
    fn zeros(points: usize, d: usize, e: usize) -> Self {
        GridArray { d, e, data: vec![0.0; points * d * e] }
    }

    /// Flat index of entry `(i, k)` at point `p`.
    #[inline]
    pub fn idx(&self, p: usize, i: usize, k: usize) -> usize {
        (p * self.d + i) * self.e + k
    }

    /// Entry `(i, k)` at point `p`.
    #[inline]
    pub fn at(&self, p: usize, i: usize, k: usize) -> f64 {
        self.data[self.idx(p, i, k)]
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    fn add(&mut self, other: &GridArray) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Full `d × d` matrix at point `p` with zero observed columns.
    pub fn matrix(&self, p: usize) -> Matrix {
        (0..self.d).map(|i| (0..self.d).map(|k| if k < self.e { self.at(p, i, k) } else { 0.0 }).collect()).collect()
    }

    /// Linear interpolation of entry `(i, k)` at a position from [`ConvGrid::locate`].
    pub fn interp(&self, (p, w): (usize, f64), i: usize, k: usize) -> f64 {
        if w > 0.0 {
            self.at(p, i, k) * (1.0 - w) + self.at(p + 1, i, k) * w
        } else {
            self.at(p, i, k)
        }
    }

    /// Number of grid points.
    pub fn points(&self) -> usize {
        self.data.len() / (self.d * self.e).max(1)
    }
}

/// Geometric-weight convolution coefficients of the censored-column kernel.
#[derive(Debug, Clone)]
struct ExpWeights {
    d: usize,
    e: usize,
    step: f64,
    alpha: Vec<f64>,
    theta: Vec<f64>,
    r: Vec<f64>,
    one_minus_r: Vec<f64>,
}

impl ExpWeights {
    fn new(params: &ModelParams, step: f64) -> Self {
        let (d, e) = (params.d, params.e);
        let mut w = ExpWeights { d, e, step, alpha: vec![], theta: vec![], r: vec![], one_minus_r: vec![] };
        for i in 0..d {
            for k in 0..e {
                let (a, th) = (params.alpha[i][k], params.theta[i][k]);
                w.alpha.push(a);
                w.theta.push(th);
                w.r.push((-th * step).exp());
                w.one_minus_r.push(-(-th * step).exp_m1());
            }
        }
        w
    }

    #[inline]
    fn ik(&self, i: usize, k: usize) -> usize {
        i * self.e + k
    }
}

/// `U[p] = Σ_{m=1}^{p} r^{m-1} x[p-m]` for every `p`.
fn geo_u(x: &[f64], r: f64) -> Vec<f64> {
    let mut u = vec![0.0; x.len()];
    for p in 1..x.len() {
        u[p] = x[p - 1] + r * u[p - 1];
    }
    u
}

/// `V[p] = Σ_{m=1}^{p} (m-1) r^{m-1} x[p-m]`, given `U`.
fn geo_v(u: &[f64], r: f64) -> Vec<f64> {
    let mut v = vec![0.0; u.len()];
    for p in 1..u.len() {
        v[p] = r * (v[p - 1] + u[p - 1]);
    }
    v
}

/// Cell averages `(x[q] + x[q+1]) / 2` of entry `(k, j)` of a grid array;
/// the last entry keeps the endpoint value and is never weighted.
fn series(a: &GridArray, k: usize, j: usize) -> Vec<f64> {
    let n = a.points();
    (0..n).map(|p| if p + 1 < n { 0.5 * (a.at(p, k, j) + a.at(p + 1, k, j)) } else { a.at(p, k, j) }).collect()
}

/// `Σ_k W^{ik} ⋆ x̄^{kj}` where `W_m = Φ(mΔ) - Φ((m-1)Δ)` and `x̄` are cell
/// averages, i.e. [`conv_quadrature_averaged`] of `x` with the censored-column kernel.
fn apply_kernel(w: &ExpWeights, x: &GridArray) -> GridArray {
    let points = x.points();
    let mut out = GridArray::zeros(points, w.d, w.e);
    for k in 0..w.e {
        for j in 0..w.e {
            let xs = series(x, k, j);
            if xs.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..w.d {
                let q = w.ik(i, k);
                let c = w.alpha[q] * w.one_minus_r[q];
                if c == 0.0 {
                    continue;
                }
                let u = geo_u(&xs, w.r[q]);
                for p in 0..points {
                    let o = out.idx(p, i, j);
                    out.data[o] += c * u[p];
                }
            }
        }
    }
    out
}

/// Integral tables: `H = Φ_E + conv(Ψ, h)` with `Ψ` the antiderivative of `Φ_E`.
fn integrate_tables(w: &ExpWeights, params: &ModelParams, h: &GridArray) -> GridArray {
    let points = h.points();
    let mut out = GridArray::zeros(points, w.d, w.e);
    for p in 0..points {
        let t = p as f64 * w.step;
        for i in 0..w.d {
            for k in 0..w.e {
                let o = out.idx(p, i, k);
                out.data[o] = params.phi_integral(i, k, t);
            }
        }
    }
    for k in 0..w.e {
        for j in 0..w.e {
            let xs = series(h, k, j);
            if xs.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut prefix = vec![0.0; points];
            for p in 1..points {
                prefix[p] = prefix[p - 1] + xs[p - 1];
            }
            for i in 0..w.d {
                let q = w.ik(i, k);
                let a = w.alpha[q];
                if a == 0.0 {
                    continue;
                }
                let u = geo_u(&xs, w.r[q]);
                let c = a * w.one_minus_r[q] / w.theta[q];
                for p in 0..points {
                    let o = out.idx(p, i, j);
                    out.data[o] += a * w.step * prefix[p] - c * u[p];
                }
            }
        }
    }
    out
}

/// Sampled `h_E` and `H_E` on a grid with truncation metadata.
#[derive(Debug, Clone)]
pub struct HTables {
    /// Grid the tables live on.
    pub grid: ConvGrid,
    /// `h_E` samples (events per unit time).
    pub h: GridArray,
    /// `H_E` samples (events).
    pub big_h: GridArray,
    /// Number of series terms accumulated.
    pub k_star: usize,
    /// Max-norm of the last accumulated term.
    pub residual_max: f64,
}

impl HTables {
    /// `h_E` matrix at point `p`.
    pub fn h_matrix(&self, p: usize) -> Matrix {
        self.h.matrix(p)
    }

    /// `H_E` matrix at point `p`.
    pub fn big_h_matrix(&self, p: usize) -> Matrix {
        self.big_h.matrix(p)
    }
}

fn kernel_samples(params: &ModelParams, grid: &ConvGrid) -> GridArray {
    let (d, e) = (params.d, params.e);
    let mut a = GridArray::zeros(grid.n + 1, d, e);
    for p in 0..=grid.n {
        for i in 0..d {
            for k in 0..e {
                let o = a.idx(p, i, k);
                a.data[o] = params.phi(i, k, grid.t(p));
            }
        }
    }
    a
}

/// Builds `h_E` by accumulating `φ_E, φ_E ⊛ φ_E, ...` until the newest term
/// falls below `gamma_h` in max-norm, then `H_E = Φ_E + h_E ⊛ Φ_E`.
///
/// `⊛` is [`conv_quadrature_averaged`], evaluated for the whole grid at once
/// through the geometric structure of the exponential kernel weights.
pub fn compute_h(params: &ModelParams, grid: &ConvGrid, gamma_h: f64) -> Result<HTables> {
    params.validate()?;
    let report = check_subcriticality(params);
    if report.rho_ee >= 1.0 {
        return Err(PmbpError::NotSubcritical(report.rho_ee));
    }
    let w = ExpWeights::new(params, grid.step);
    let mut term = kernel_samples(params, grid);
    let mut h = term.clone();
    let mut k_star = 1;
    let mut residual = term.max_abs();
    while residual >= gamma_h {
        if k_star >= MAX_TERMS {
            return Err(PmbpError::Truncation { terms: k_star, residual });
        }
        term = apply_kernel(&w, &term);
        h.add(&term);
        k_star += 1;
        residual = term.max_abs();
    }
    let big_h = integrate_tables(&w, params, &h);
    Ok(HTables { grid: *grid, h, big_h, k_star, residual_max: residual })
}

/// Derivatives of `h_E` and `H_E` with respect to one kernel parameter.
#[derive(Debug, Clone)]
pub struct GradTables {
    /// Parameter the tables differentiate against.
    pub id: ParamId,
    /// `∂h_E` samples.
    pub dh: GridArray,
    /// `∂H_E` samples.
    pub d_big_h: GridArray,
}

/// Kernel parameter derivative of the convolution weights applied to `x`.
///
/// Only row `a` is non-zero. For `α`: `Σ_m (W_m/α) x[p-m]`. For `θ`:
/// `αΔ[(r-1)V + rU]` with `U`, `V` the geometric sums of `x`.
fn apply_kernel_derivative(w: &ExpWeights, id: ParamId, x: &GridArray) -> GridArray {
    let points = x.points();
    let mut out = GridArray::zeros(points, w.d, w.e);
    let (a, b, is_theta) = match id {
        ParamId::Theta(a, b) => (a, b, true),
        ParamId::Alpha(a, b) => (a, b, false),
        ParamId::Nu(_) => return out,
    };
    let q = w.ik(a, b);
    for j in 0..w.e {
        let xs = series(x, b, j);
        if xs.iter().all(|&v| v == 0.0) {
            continue;
        }
        let u = geo_u(&xs, w.r[q]);
        let vals: Vec<f64> = if is_theta {
            let v = geo_v(&u, w.r[q]);
            let (al, r) = (w.alpha[q], w.r[q]);
            (0..points).map(|p| al * w.step * (-w.one_minus_r[q] * v[p] + r * u[p])).collect()
        } else {
            u.iter().map(|x| w.one_minus_r[q] * x).collect()
        };
        for (p, val) in vals.into_iter().enumerate() {
            let o = out.idx(p, a, j);
            out.data[o] += val;
        }
    }
    out
}

/// Derivative of `conv(Ψ, x)` with respect to one kernel parameter (row `a` only).
fn integrate_derivative(w: &ExpWeights, id: ParamId, x: &GridArray) -> GridArray {
    let points = x.points();
    let mut out = GridArray::zeros(points, w.d, w.e);
    let (a, b, is_theta) = match id {
        ParamId::Theta(a, b) => (a, b, true),
        ParamId::Alpha(a, b) => (a, b, false),
        ParamId::Nu(_) => return out,
    };
    let q = w.ik(a, b);
    let (al, th, r, omr) = (w.alpha[q], w.theta[q], w.r[q], w.one_minus_r[q]);
    for j in 0..w.e {
        let xs = series(x, b, j);
        if xs.iter().all(|&v| v == 0.0) {
            continue;
        }
        let u = geo_u(&xs, r);
        let mut prefix = vec![0.0; points];
        for p in 1..points {
            prefix[p] = prefix[p - 1] + xs[p - 1];
        }
        let vals: Vec<f64> = if is_theta {
            let v = geo_v(&u, r);
            (0..points)
                .map(|p| {
                    let dw = al * w.step * (-omr * v[p] + r * u[p]);
                    let wsum = al * omr * u[p];
                    -dw / th + wsum / (th * th)
                })
                .collect()
        } else {
            (0..points).map(|p| w.step * prefix[p] - omr * u[p] / th).collect()
        };
        for (p, val) in vals.into_iter().enumerate() {
            let o = out.idx(p, a, j);
            out.data[o] += val;
        }
    }
    out
}

/// Derivative tables of `h_E` and `H_E` for parameter `id`.
///
/// Differentiates the truncated series term by term: with `B_n` the `n`-th
/// term, `∂B_{n+1} = φ_E ⊛ ∂B_n + ∂φ_E ⊛ B_n`, seeded with `∂φ_E`, summed
/// until at least as many terms as `h_E` used and the newest derivative term
/// drops below `gamma_h`. Then `∂H = ∂Φ_E + ∂h ⊛ Φ_E + h ⊛ ∂Φ_E`.
/// Parameters outside the censored columns give zero tables.
pub fn grad_h(params: &ModelParams, tables: &HTables, gamma_h: f64, id: ParamId) -> Result<GradTables> {
    let grid = tables.grid;
    let (d, e) = (params.d, params.e);
    let zeros = GridArray::zeros(grid.n + 1, d, e);
    let in_block = match id {
        ParamId::Theta(_, b) | ParamId::Alpha(_, b) => b < e,
        ParamId::Nu(_) => false,
    };
    if !in_block {
        return Ok(GradTables { id, dh: zeros.clone(), d_big_h: zeros });
    }
    let w = ExpWeights::new(params, grid.step);
    let (a, b) = match id {
        ParamId::Theta(a, b) | ParamId::Alpha(a, b) => (a, b),
        ParamId::Nu(_) => unreachable!(),
    };
    let mut dterm = zeros.clone();
    for p in 0..=grid.n {
        let t = grid.t(p);
        let (al, th) = (params.alpha[a][b], params.theta[a][b]);
        let o = dterm.idx(p, a, b);
        dterm.data[o] = match id {
            ParamId::Theta(..) => al * (1.0 - th * t) * (-th * t).exp(),
            _ => th * (-th * t).exp(),
        };
    }
    let mut term = kernel_samples(params, &grid);
    let mut dh = dterm.clone();
    let mut n = 1;
    while n < tables.k_star || dterm.max_abs() >= gamma_h {
        if n >= MAX_TERMS {
            return Err(PmbpError::Truncation { terms: n, residual: dterm.max_abs() });
        }
        let mut next = apply_kernel(&w, &dterm);
        next.add(&apply_kernel_derivative(&w, id, &term));
        dterm = next;
        term = apply_kernel(&w, &term);
        dh.add(&dterm);
        n += 1;
    }
    let mut d_big_h = integrate_tables(&w, params, &dh);
    for p in 0..=grid.n {
        for i in 0..d {
            for k in 0..e {
                let o = d_big_h.idx(p, i, k);
                d_big_h.data[o] -= params.phi_integral(i, k, grid.t(p));
            }
        }
    }
    for p in 0..=grid.n {
        let t = grid.t(p);
        let (al, th) = (params.alpha[a][b], params.theta[a][b]);
        let o = d_big_h.idx(p, a, b);
        d_big_h.data[o] += match id {
            ParamId::Theta(..) => al * t * (-th * t).exp(),
            _ => -(-th * t).exp_m1(),
        };
    }
    d_big_h.add(&integrate_derivative(&w, id, &tables.h));
    Ok(GradTables { id, dh, d_big_h })
}
