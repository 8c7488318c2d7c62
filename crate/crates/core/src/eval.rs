//! PMBP conditional intensity `ξ` and compensator `Ξ` at arbitrary times,
//! with reverse-mode accumulation of their parameter gradients.
//!
//! For a target time `t` with `M = ⌊t/Δ⌋` the outer convolution uses the
//! partition anchored at `t`: cells `[t - mΔ, t - (m-1)Δ]` for `m = 1..M`
//! plus a leading partial cell `[0, t - MΔ]`. Each cell weighs `g` at its left
//! end by the increment of `H_E` over the cell, so only grid samples of `H_E`
//! are needed (the partial cell and the impulse term read `H_E(t)`, `h_E(t)`
//! by linear interpolation). On grid points this is exactly
//! [`conv_quadrature`](crate::conv::conv_quadrature).
//!
//! With `g^k(s) = ν^k + Σ_l φ^{kj}(s - t_l)` over observed events `t_l ≤ s`,
//! the cell sum for one event collapses to `αθ e^{-θ f} K[M_l]` where
//! `K[n] = Σ_{m ≤ n} r^{n-m} ΔH[m]`, `r = e^{-θΔ}`, `M_l = ⌊(t - t_l)/Δ⌋`
//! and `f = t - t_l - M_l Δ`. Precomputing `K` per kernel pair makes a query
//! cost proportional to the number of earlier events.

use crate::conv::{grad_h, ConvGrid, HTables};
use crate::data::EventHistory;
use crate::error::{PmbpError, Result};
use crate::hawkes::merged_events;
use crate::model::{ModelParams, ParamId};

/// `ξ` and `Ξ` of every dimension at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValues {
    /// Conditional intensity per dimension.
    pub xi: Vec<f64>,
    /// Compensator per dimension.
    pub compensator: Vec<f64>,
}

/// Evaluator bound to one parameter set, observed history and table set.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    params: &'a ModelParams,
    tables: &'a HTables,
    /// Observed events of the timestamped dimensions, chronological.
    events: Vec<(f64, usize)>,
    /// `K` arrays indexed by `pair(i, k, j)`.
    k_arr: Vec<Vec<f64>>,
    /// `J[n] = Σ_{m ≤ n} (n - m) r^{n-m} ΔH[m]`, indexed like `k_arr`.
    j_arr: Vec<Vec<f64>>,
    /// `L[n] = Σ_{m ≤ n} m ΔH[m]` indexed by `i * e + k`.
    l_arr: Vec<Vec<f64>>,
}

/// Reverse-mode accumulator for `Σ_q (c_ξ · ξ(t_q) + c_Ξ · Ξ(t_q))`.
#[derive(Debug, Clone)]
pub struct GradientAccumulator {
    d: usize,
    theta: Vec<f64>,
    alpha: Vec<f64>,
    nu: Vec<f64>,
    adj_h: Vec<f64>,
    adj_big_h: Vec<f64>,
    adj_k: Vec<Vec<f64>>,
    adj_l: Vec<Vec<f64>>,
}

impl GradientAccumulator {
    /// Adds another accumulator built on the same parameters and tables.
    pub fn merge(&mut self, other: &GradientAccumulator) {
        fn add(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(&mut self.theta, &other.theta);
        add(&mut self.alpha, &other.alpha);
        add(&mut self.nu, &other.nu);
        add(&mut self.adj_h, &other.adj_h);
        add(&mut self.adj_big_h, &other.adj_big_h);
        self.adj_k.iter_mut().zip(&other.adj_k).for_each(|(a, b)| add(a, b));
        self.adj_l.iter_mut().zip(&other.adj_l).for_each(|(a, b)| add(a, b));
    }
}

impl<'a> Evaluator<'a> {
    /// Prepares an evaluator; events of censored dimensions in `observed` are ignored.
    pub fn new(params: &'a ModelParams, observed: &EventHistory, tables: &'a HTables) -> Result<Self> {
        let (d, e) = (params.d, params.e);
        if observed.dim() != d {
            return Err(PmbpError::Dimension(format!("history has {} dimensions, model {d}", observed.dim())));
        }
        if tables.h.points() != tables.grid.n + 1 && e > 0 {
            return Err(PmbpError::Domain("tables do not match their grid".into()));
        }
        let events: Vec<(f64, usize)> = merged_events(observed).into_iter().filter(|&(_, j)| j >= e).collect();
        if let Some(&(t, _)) = events.iter().find(|&&(t, _)| t < 0.0) {
            return Err(PmbpError::Domain(format!("event time {t} is negative")));
        }
        let points = tables.grid.n + 1;
        let step = tables.grid.step;
        let ec = d - e;
        let mut k_arr = Vec::with_capacity(d * e * ec);
        let mut j_arr = Vec::with_capacity(d * e * ec);
        let mut l_arr = Vec::with_capacity(d * e);
        for i in 0..d {
            for k in 0..e {
                let dh: Vec<f64> = (0..points)
                    .map(|m| if m == 0 { 0.0 } else { tables.big_h.at(m, i, k) - tables.big_h.at(m - 1, i, k) })
                    .collect();
                let mut l = vec![0.0; points];
                for m in 1..points {
                    l[m] = l[m - 1] + m as f64 * dh[m];
                }
                l_arr.push(l);
                for j in e..d {
                    let r = (-params.theta[k][j] * step).exp();
                    let mut kk = vec![0.0; points];
                    let mut jj = vec![0.0; points];
                    for n in 1..points {
                        kk[n] = r * kk[n - 1] + dh[n];
                        jj[n] = r * (jj[n - 1] + kk[n - 1]);
                    }
                    k_arr.push(kk);
                    j_arr.push(jj);
                }
            }
        }
        Ok(Evaluator { params, tables, events, k_arr, j_arr, l_arr })
    }

    /// Grid of the underlying tables.
    pub fn grid(&self) -> &ConvGrid {
        &self.tables.grid
    }

    #[inline]
    fn pair(&self, i: usize, k: usize, j: usize) -> usize {
        let (d, e) = (self.params.d, self.params.e);
        (i * e + k) * (d - e) + (j - e)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let horizon = self.tables.grid.horizon();
        if !(t >= 0.0 && t <= horizon * (1.0 + 1e-9)) {
            return Err(PmbpError::Domain(format!("time {t} outside the grid [0, {horizon}]")));
        }
        Ok(())
    }

    /// Events strictly before `t`.
    fn past(&self, t: f64) -> &[(f64, usize)] {
        &self.events[..self.events.partition_point(|&(s, _)| s < t)]
    }

    /// Position of lag `u ≥ 0` on the grid, clamped to the last node.
    fn locate(&self, u: f64) -> (usize, f64) {
        let (m, w) = self.tables.grid.locate(u);
        if m >= self.tables.grid.n {
            (self.tables.grid.n, 0.0)
        } else {
            (m, w)
        }
    }

    /// `ξ` and `Ξ` of all dimensions at time `t ∈ [0, grid horizon]`.
    pub fn point(&self, t: f64) -> Result<PointValues> {
        self.check_time(t)?;
        let p = self.params;
        let (d, e) = (p.d, p.e);
        let step = self.tables.grid.step;
        let mut xi = p.nu.clone();
        let mut big: Vec<f64> = (0..d).map(|i| p.nu[i] * t + if t > 0.0 { p.gamma[i] } else { 0.0 }).collect();
        let past = self.past(t);
        for &(s, j) in past {
            let u = t - s;
            for i in 0..d {
                let (a, th) = (p.alpha[i][j], p.theta[i][j]);
                let decay = (-th * u).exp();
                xi[i] += a * th * decay;
                big[i] += -a * (-th * u).exp_m1();
            }
        }
        if e == 0 {
            return Ok(PointValues { xi, compensator: big });
        }
        let pos = self.locate(t);
        let m_t = pos.0;
        for i in 0..d {
            for k in 0..e {
                let h_t = self.tables.h.interp(pos, i, k);
                let hh_t = self.tables.big_h.interp(pos, i, k);
                let hh_m = self.tables.big_h.at(m_t, i, k);
                xi[i] += h_t * p.gamma[k] + hh_t * p.nu[k];
                big[i] += hh_t * p.gamma[k] + p.nu[k] * (t * hh_m - step * self.l_arr[i * e + k][m_t]);
            }
        }
        for &(s, j) in past {
            let (m_l, f) = self.lag(t - s);
            for k in 0..e {
                let (a, th) = (p.alpha[k][j], p.theta[k][j]);
                let decay = (-th * f).exp();
                for i in 0..d {
                    let kk = self.k_arr[self.pair(i, k, j)][m_l];
                    xi[i] += a * th * decay * kk;
                    big[i] += a * (self.tables.big_h.at(m_l, i, k) - decay * kk);
                    if s <= 0.0 {
                        let partial = self.tables.big_h.interp(pos, i, k) - self.tables.big_h.at(m_t, i, k);
                        xi[i] += partial * a * th;
                    }
                }
            }
        }
        Ok(PointValues { xi, compensator: big })
    }

    /// Appends an event of censored-out dimension `j ≥ e` at `t`, which must
    /// not precede the latest event.
    pub fn push_event(&mut self, t: f64, j: usize) -> Result<()> {
        if j < self.params.e || j >= self.params.d {
            return Err(PmbpError::Dimension(format!("dimension {j} is not timestamped")));
        }
        if self.events.last().is_some_and(|&(s, _)| s > t) || !(t >= 0.0) {
            return Err(PmbpError::Domain(format!("event at {t} precedes the latest event")));
        }
        self.events.push((t, j));
        Ok(())
    }

    /// Right-limit parts of `ξ` at `t` (events at `t` included): the direct
    /// kernel sum `a(t⁺)` and the event convolution through `h_E`, per row.
    pub fn excitation_parts(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_time(t)?;
        let p = self.params;
        let (d, e) = (p.d, p.e);
        let upto = &self.events[..self.events.partition_point(|&(s, _)| s <= t)];
        let mut direct = vec![0.0; d];
        let mut conv = vec![0.0; d];
        let pos = self.locate(t);
        for &(s, j) in upto {
            let u = t - s;
            for (i, v) in direct.iter_mut().enumerate() {
                *v += p.alpha[i][j] * p.theta[i][j] * (-p.theta[i][j] * u).exp();
            }
            let (m_l, f) = self.lag(u);
            for k in 0..e {
                let (a, th) = (p.alpha[k][j], p.theta[k][j]);
                let decay = (-th * f).exp();
                for (i, v) in conv.iter_mut().enumerate() {
                    *v += a * th * decay * self.k_arr[self.pair(i, k, j)][m_l];
                    if s <= 0.0 {
                        *v += (self.tables.big_h.interp(pos, i, k) - self.tables.big_h.at(pos.0, i, k)) * a * th;
                    }
                }
            }
        }
        Ok((direct, conv))
    }

    /// Number of held events per dimension.
    pub fn event_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.params.d];
        for &(_, j) in &self.events {
            out[j] += 1;
        }
        out
    }

    /// Cell count and offset of lag `u`: `u = M Δ + f`, `f ≥ 0`.
    fn lag(&self, u: f64) -> (usize, f64) {
        let (m, _) = self.locate(u);
        (m, (u - m as f64 * self.tables.grid.step).max(0.0))
    }

    /// [`Evaluator::point`] at each of `times`.
    pub fn points(&self, times: &[f64]) -> Result<Vec<PointValues>> {
        times.iter().map(|&t| self.point(t)).collect()
    }

    /// Fresh gradient accumulator for this evaluator.
    pub fn accumulator(&self) -> GradientAccumulator {
        let (d, e) = (self.params.d, self.params.e);
        let points = self.tables.grid.n + 1;
        GradientAccumulator {
            d,
            theta: vec![0.0; d * d],
            alpha: vec![0.0; d * d],
            nu: vec![0.0; d],
            adj_h: vec![0.0; points * d * e],
            adj_big_h: vec![0.0; points * d * e],
            adj_k: vec![vec![0.0; points]; self.k_arr.len()],
            adj_l: vec![vec![0.0; points]; self.l_arr.len()],
        }
    }

    /// Adds the gradient of `c_xi · ξ(t) + c_comp · Ξ(t)` to `acc`.
    pub fn accumulate(&self, t: f64, c_xi: &[f64], c_comp: &[f64], acc: &mut GradientAccumulator) -> Result<()> {
        self.check_time(t)?;
        let p = self.params;
        let (d, e) = (p.d, p.e);
        let step = self.tables.grid.step;
        let past = self.past(t);
        for i in 0..d {
            acc.nu[i] += c_xi[i] + c_comp[i] * t;
        }
        for &(s, j) in past {
            let u = t - s;
            for i in 0..d {
                let (a, th) = (p.alpha[i][j], p.theta[i][j]);
                let decay = (-th * u).exp();
                let q = i * d + j;
                acc.alpha[q] += c_xi[i] * th * decay - c_comp[i] * (-th * u).exp_m1();
                acc.theta[q] += c_xi[i] * a * (1.0 - th * u) * decay + c_comp[i] * a * u * decay;
            }
        }
        if e == 0 {
            return Ok(());
        }
        let pos = self.locate(t);
        let m_t = pos.0;
        let idx = |m: usize, i: usize, k: usize| (m * d + i) * e + k;
        let spread = |arr: &mut Vec<f64>, i: usize, k: usize, v: f64| {
            let (m, w) = pos;
            if w > 0.0 {
                arr[idx(m, i, k)] += v * (1.0 - w);
                arr[idx(m + 1, i, k)] += v * w;
            } else {
                arr[idx(m, i, k)] += v;
            }
        };
        for i in 0..d {
            for k in 0..e {
                let hh_t = self.tables.big_h.interp(pos, i, k);
                let hh_m = self.tables.big_h.at(m_t, i, k);
                acc.nu[k] += c_xi[i] * hh_t + c_comp[i] * (t * hh_m - step * self.l_arr[i * e + k][m_t]);
                spread(&mut acc.adj_h, i, k, c_xi[i] * p.gamma[k]);
                spread(&mut acc.adj_big_h, i, k, c_xi[i] * p.nu[k] + c_comp[i] * p.gamma[k]);
                acc.adj_big_h[idx(m_t, i, k)] += c_comp[i] * p.nu[k] * t;
                acc.adj_l[i * e + k][m_t] -= c_comp[i] * p.nu[k] * step;
            }
        }
        for &(s, j) in past {
            let (m_l, f) = self.lag(t - s);
            for k in 0..e {
                let (a, th) = (p.alpha[k][j], p.theta[k][j]);
                let decay = (-th * f).exp();
                let q = k * d + j;
                for i in 0..d {
                    let pr = self.pair(i, k, j);
                    let kk = self.k_arr[pr][m_l];
                    let moment = decay * (f * kk + step * self.j_arr[pr][m_l]);
                    let hh_l = self.tables.big_h.at(m_l, i, k);
                    acc.alpha[q] += c_xi[i] * th * decay * kk + c_comp[i] * (hh_l - decay * kk);
                    acc.theta[q] += c_xi[i] * a * (decay * kk - th * moment) + c_comp[i] * a * moment;
                    acc.adj_k[pr][m_l] += decay * a * (c_xi[i] * th - c_comp[i]);
                    acc.adj_big_h[idx(m_l, i, k)] += c_comp[i] * a;
                    if s <= 0.0 {
                        let partial = self.tables.big_h.interp(pos, i, k) - self.tables.big_h.at(m_t, i, k);
                        acc.alpha[q] += c_xi[i] * partial * th;
                        acc.theta[q] += c_xi[i] * partial * a;
                        spread(&mut acc.adj_big_h, i, k, c_xi[i] * a * th);
                        acc.adj_big_h[idx(m_t, i, k)] -= c_xi[i] * a * th;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient over [`ModelParams::free_ids`] from an accumulator.
    ///
    /// Censored-column kernel parameters act through `h_E` and `H_E`; their
    /// table adjoints are contracted with [`grad_h`] derivative tables.
    pub fn finish(&self, mut acc: GradientAccumulator, gamma_h: f64) -> Result<Vec<f64>> {
        let p = self.params;
        let (d, e) = (p.d, p.e);
        let points = self.tables.grid.n + 1;
        let step = self.tables.grid.step;
        let idx = |m: usize, i: usize, k: usize| (m * d + i) * e + k;
        for i in 0..d {
            for k in 0..e {
                let mut adj_dh = vec![0.0; points];
                let mut tail = 0.0;
                for m in (1..points).rev() {
                    tail += acc.adj_l[i * e + k][m];
                    adj_dh[m] += m as f64 * tail;
                }
                for j in e..d {
                    let pr = self.pair(i, k, j);
                    let r = (-p.theta[k][j] * step).exp();
                    let mut back = 0.0;
                    for m in (1..points).rev() {
                        back = r * back + acc.adj_k[pr][m];
                        adj_dh[m] += back;
                    }
                }
                for m in 1..points {
                    acc.adj_big_h[idx(m, i, k)] += adj_dh[m];
                    acc.adj_big_h[idx(m - 1, i, k)] -= adj_dh[m];
                }
            }
        }
        let mut out = Vec::with_capacity(2 * d * d + d);
        for id in p.free_ids() {
            let v = match id {
                ParamId::Theta(i, j) | ParamId::Alpha(i, j) if j < e => {
                    let g = grad_h(p, self.tables, gamma_h, id)?;
                    let direct = if matches!(id, ParamId::Theta(..)) { acc.theta[i * d + j] } else { acc.alpha[i * d + j] };
                    direct
                        + g.dh.data.iter().zip(&acc.adj_h).map(|(a, b)| a * b).sum::<f64>()
                        + g.d_big_h.data.iter().zip(&acc.adj_big_h).map(|(a, b)| a * b).sum::<f64>()
                }
                ParamId::Theta(i, j) => acc.theta[i * acc.d + j],
                ParamId::Alpha(i, j) => acc.alpha[i * acc.d + j],
                ParamId::Nu(i) => acc.nu[i],
            };
            out.push(v);
        }
        Ok(out)
    }
}

fn check_grid(tables: &HTables, grid: &ConvGrid) -> Result<()> {
    if tables.grid != *grid {
        return Err(PmbpError::Domain("tables were computed on a different grid".into()));
    }
    Ok(())
}

/// `ξ` at every grid point.
pub fn xi_eval(params: &ModelParams, observed: &EventHistory, tables: &HTables, grid: &ConvGrid) -> Result<Vec<Vec<f64>>> {
    check_grid(tables, grid)?;
    let ev = Evaluator::new(params, observed, tables)?;
    (0..=grid.n).map(|p| ev.point(grid.t(p)).map(|v| v.xi)).collect()
}

/// `Ξ` at every grid point.
pub fn compensator_eval(
    params: &ModelParams,
    observed: &EventHistory,
    tables: &HTables,
    grid: &ConvGrid,
) -> Result<Vec<Vec<f64>>> {
    check_grid(tables, grid)?;
    let ev = Evaluator::new(params, observed, tables)?;
    (0..=grid.n).map(|p| ev.point(grid.t(p)).map(|v| v.compensator)).collect()
}
