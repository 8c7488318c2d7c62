//! PMBP simulation by thinning against intensity upper bounds, and interval
//! count forecasts past a training horizon.
//!
//! Only events of timestamped dimensions (`E^c`) feed back into the
//! intensity; censored dimensions are conditionally Poisson given them.
//! Exponential kernels let the direct excitation decay exactly between
//! proposals, so no separate time discretization is needed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{compute_h, ConvGrid, HTables, DEFAULT_GAMMA_H};
use crate::data::{bin_counts, Dataset, EventHistory};
use crate::error::{PmbpError, Result};
use crate::eval::Evaluator;
use crate::hawkes::DEFAULT_EVENT_CAP;
use crate::model::ModelParams;
use crate::rng::stream_rng;

/// Safety inflation of grid maxima.
const INFLATION: f64 = 1.05;

/// Which intensity bound drives thinning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// Bound valid at any time: `h_E` replaced by its overall maximum.
    #[default]
    Ub1,
    /// Bound valid until the next accepted event, built from the
    /// right-running maximum of `h_E`.
    Ub2,
}

/// Parameter-dependent quantities shared by all bound evaluations.
#[derive(Debug, Clone)]
pub struct BoundContext {
    /// Entrywise maximum of `h_E` (and of cell-averaged `H_E` slopes),
    /// inflated; indexed `i * e + k`.
    pub h_max: Vec<f64>,
    /// Tables of the right-running maxima `ĥ_E` and matching `Ĥ_E`.
    pub envelope: HTables,
    /// `H_E` at the end of the grid, indexed `i * e + k`.
    pub big_h_total: Vec<f64>,
    /// End of the grid.
    pub horizon: f64,
}

impl BoundContext {
    /// Builds the context from `h_E` tables.
    pub fn new(params: &ModelParams, tables: &HTables) -> Self {
        let (d, e) = (params.d, params.e);
        let grid = tables.grid;
        let n = grid.n;
        let mut envelope = tables.clone();
        let mut h_max = vec![0.0; d * e];
        let mut big_h_total = vec![0.0; d * e];
        for i in 0..d {
            for k in 0..e {
                let h: Vec<f64> = (0..=n).map(|p| tables.h.at(p, i, k)).collect();
                let big: Vec<f64> = (0..=n).map(|p| tables.big_h.at(p, i, k)).collect();
                let mut slope_tail = vec![0.0f64; n + 2];
                let mut h_tail = vec![0.0f64; n + 2];
                for p in (0..=n).rev() {
                    let slope = if p >= 1 { (big[p] - big[p - 1]).max(0.0) } else { 0.0 };
                    slope_tail[p] = slope_tail[p + 1].max(slope);
                    h_tail[p] = h_tail[p + 1].max(h[p]);
                }
                let mut acc = 0.0;
                for p in 0..=n {
                    if p >= 1 {
                        acc += slope_tail[p];
                    }
                    let idx = envelope.big_h.idx(p, i, k);
                    envelope.big_h.data[idx] = acc;
                    envelope.h.data[idx] = h_tail[p].max(slope_tail[p + 1] / grid.step);
                }
                h_max[i * e + k] = INFLATION * envelope.h.at(0, i, k).max(slope_tail[1] / grid.step);
                big_h_total[i * e + k] = big[n];
            }
        }
        BoundContext { h_max, envelope, big_h_total, horizon: grid.horizon() }
    }
}

/// Evaluators over the current timestamped history for `ξ` and its envelope.
#[derive(Debug, Clone)]
pub struct SamplerState<'a> {
    /// Evaluator of `ξ` with the true tables.
    pub main: Evaluator<'a>,
    /// Evaluator with envelope tables.
    pub envelope: Evaluator<'a>,
}

impl<'a> SamplerState<'a> {
    /// State holding the timestamped events of `history`.
    pub fn new(params: &'a ModelParams, tables: &'a HTables, ctx: &'a BoundContext, history: &EventHistory) -> Result<Self> {
        Ok(SamplerState { main: Evaluator::new(params, history, tables)?, envelope: Evaluator::new(params, history, &ctx.envelope)? })
    }

    fn push(&mut self, t: f64, j: usize) -> Result<()> {
        self.main.push_event(t, j)?;
        self.envelope.push_event(t, j)
    }
}

/// Per-dimension bound on `ξ` from `t` until the next accepted event.
pub fn pmbp_upper_bound(ctx: &BoundContext, params: &ModelParams, state: &SamplerState, t: f64, mode: BoundMode) -> Result<Vec<f64>> {
    let (d, e) = (params.d, params.e);
    let (direct, _) = state.main.excitation_parts(t)?;
    let mut out: Vec<f64> = (0..d).map(|i| params.nu[i] + direct[i]).collect();
    if e == 0 {
        return Ok(out);
    }
    match mode {
        BoundMode::Ub1 => {
            let counts = state.main.event_counts();
            let step = state.main.grid().step;
            for (i, o) in out.iter_mut().enumerate() {
                for k in 0..e {
                    let mut mass = params.gamma[k] + ctx.horizon * params.nu[k];
                    for j in e..d {
                        let (a, th) = (params.alpha[k][j], params.theta[k][j]);
                        mass += counts[j] as f64 * a * (1.0 + 2.0 * step * th);
                    }
                    *o += ctx.h_max[i * e + k] * mass;
                }
            }
        }
        BoundMode::Ub2 => {
            let (_, conv_hat) = state.envelope.excitation_parts(t)?;
            let grid = ctx.envelope.grid;
            let here = grid.locate(t);
            let ahead = grid.locate((ctx.horizon - t + grid.step).min(ctx.horizon));
            for (i, o) in out.iter_mut().enumerate() {
                let mut extra = conv_hat[i];
                for k in 0..e {
                    extra += ctx.envelope.h.interp(here, i, k) * params.gamma[k]
                        + ctx.big_h_total[i * e + k] * params.nu[k]
                        + ctx.envelope.big_h.interp(ahead, i, k) * direct[k];
                }
                *o += INFLATION * extra;
            }
        }
    }
    Ok(out)
}

/// Thinning telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplerStats {
    /// Proposed times.
    pub proposals: usize,
    /// Accepted events.
    pub accepted: usize,
}

impl SamplerStats {
    /// Fraction of proposals accepted.
    pub fn acceptance_ratio(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Options of [`sample_pmbp_with`].
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<'h> {
    /// Time sampling starts from.
    pub start: f64,
    /// History before `start`; its timestamped events condition the intensity.
    pub initial: Option<&'h EventHistory>,
    /// Sample only timestamped dimensions.
    pub timestamped_only: bool,
    /// Bound used for thinning.
    pub mode: BoundMode,
    /// Accepted-event cap.
    pub cap: usize,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        SampleOptions { start: 0.0, initial: None, timestamped_only: false, mode: BoundMode::Ub1, cap: DEFAULT_EVENT_CAP }
    }
}

/// Thinning on `[start, horizon)`; returns only the newly sampled events.
///
/// Fails with [`PmbpError::BoundViolation`] if the intensity at a proposal
/// exceeds the bound in any dimension.
pub fn sample_pmbp_with(
    params: &ModelParams,
    horizon: f64,
    tables: &HTables,
    ctx: &BoundContext,
    rng: &mut ChaCha8Rng,
    opts: SampleOptions,
) -> Result<(EventHistory, SamplerStats)> {
    params.validate()?;
    let (d, e) = (params.d, params.e);
    if !(opts.start >= 0.0 && opts.start <= horizon) || horizon > tables.grid.horizon() * (1.0 + 1e-9) {
        return Err(PmbpError::Domain(format!("cannot sample [{}, {horizon}) on a grid ending at {}", opts.start, tables.grid.horizon())));
    }
    let initial = match opts.initial {
        Some(h) => h.truncated(opts.start),
        None => EventHistory::empty(d, opts.start),
    };
    let mut state = SamplerState::new(params, tables, ctx, &initial)?;
    let dims: Vec<usize> = if opts.timestamped_only { (e..d).collect() } else { (0..d).collect() };
    let mut out = EventHistory::empty(d, horizon);
    let mut stats = SamplerStats::default();
    let mut t = opts.start;
    loop {
        let bound = pmbp_upper_bound(ctx, params, &state, t, opts.mode)?;
        let total: f64 = dims.iter().map(|&i| bound[i]).sum();
        if !(total > 0.0) {
            break;
        }
        t += Exp::new(total).map_err(|err| PmbpError::Evaluation(err.to_string()))?.sample(rng);
        if t >= horizon {
            break;
        }
        stats.proposals += 1;
        let xi = state.main.point(t)?.xi;
        for &i in &dims {
            if xi[i] > bound[i] * (1.0 + 1e-12) {
                return Err(PmbpError::BoundViolation { t, intensity: xi[i], bound: bound[i] });
            }
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = None;
        for &i in &dims {
            if u < xi[i] {
                chosen = Some(i);
                break;
            }
            u -= xi[i];
        }
        if let Some(i) = chosen {
            stats.accepted += 1;
            if stats.accepted > opts.cap {
                return Err(PmbpError::Explosion(opts.cap));
            }
            out.events[i].push(t);
            if i >= e {
                state.push(t, i)?;
            }
        }
    }
    Ok((out, stats))
}

/// Samples a PMBP realization on `[0, horizon)` with RNG stream 0 of `seed`.
pub fn sample_pmbp(params: &ModelParams, horizon: f64, grid: &ConvGrid, seed: u64, mode: BoundMode) -> Result<EventHistory> {
    let tables = compute_h(params, grid, DEFAULT_GAMMA_H)?;
    let ctx = BoundContext::new(params, &tables);
    let opts = SampleOptions { mode, ..Default::default() };
    Ok(sample_pmbp_with(params, horizon, &tables, &ctx, &mut stream_rng(seed, 0), opts)?.0)
}

/// Forecast of one interval in one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalForecast {
    /// Interval start.
    pub interval_start: f64,
    /// Interval end.
    pub interval_end: f64,
    /// One-based dimension.
    pub dim: usize,
    /// Mean expected count.
    pub mean: f64,
    /// Across-sample standard deviation.
    pub sd: f64,
}

/// Forecast rows plus the number of discarded samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    /// Rows ordered by interval, then dimension.
    pub rows: Vec<IntervalForecast>,
    /// Samples that failed (explosion or bound violation) and were dropped.
    pub failed: usize,
    /// Requested samples.
    pub n_samples: usize,
}

impl Forecast {
    /// Whether dropped samples exceed 1% of the requested count.
    pub fn needs_warning(&self) -> bool {
        self.failed * 100 > self.n_samples
    }
}

fn forecast_inputs(params: &ModelParams, data: &Dataset, boundaries: &[f64], grid: &ConvGrid) -> Result<()> {
    data.validate(params.d, params.e)?;
    if boundaries.len() < 2 || boundaries.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PmbpError::Domain("forecast boundaries must be strictly increasing".into()));
    }
    if boundaries[0] < data.horizon {
        return Err(PmbpError::Domain(format!("forecast starts at {} before the training horizon {}", boundaries[0], data.horizon)));
    }
    if *boundaries.last().unwrap() > grid.horizon() * (1.0 + 1e-9) {
        return Err(PmbpError::Domain("grid does not cover the forecast range".into()));
    }
    Ok(())
}

fn summarize(per_sample: &[Vec<Vec<f64>>], boundaries: &[f64], d: usize, failed: usize, n_samples: usize) -> Result<Forecast> {
    if per_sample.is_empty() {
        return Err(PmbpError::Evaluation("every forecast sample failed".into()));
    }
    let n = per_sample.len() as f64;
    let mut rows = Vec::new();
    for q in 0..boundaries.len() - 1 {
        for j in 0..d {
            let mean = per_sample.iter().map(|s| s[q][j]).sum::<f64>() / n;
            let sd = if per_sample.len() > 1 {
                (per_sample.iter().map(|s| (s[q][j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(IntervalForecast { interval_start: boundaries[q], interval_end: boundaries[q + 1], dim: j + 1, mean, sd });
        }
    }
    Ok(Forecast { rows, failed, n_samples })
}

fn run_samples<F>(n_samples: usize, seed: u64, f: F) -> (Vec<Vec<Vec<f64>>>, usize)
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> + Sync,
{
    let results: Vec<Result<Vec<Vec<f64>>>> = (0..n_samples).into_par_iter().map(|s| f(&mut stream_rng(seed, s as u64))).collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    (results.into_iter().filter_map(|r| r.ok()).collect(), failed)
}

/// Expected counts per interval by the compensator method: sample only
/// timestamped continuations past the training horizon, take compensator
/// increments of every dimension per sample, then average.
pub fn predict_counts(
    params: &ModelParams,
    data: &Dataset,
    boundaries: &[f64],
    n_samples: usize,
    seed: u64,
    grid: &ConvGrid,
) -> Result<Forecast> {
    forecast_inputs(params, data, boundaries, grid)?;
    let tables = compute_h(params, grid, DEFAULT_GAMMA_H)?;
    let ctx = BoundContext::new(params, &tables);
    let observed = data.history();
    let end = *boundaries.last().unwrap();
    let (per_sample, failed) = run_samples(n_samples, seed, |rng| {
        let opts = SampleOptions { start: data.horizon, initial: Some(&observed), timestamped_only: true, ..Default::default() };
        let (future, _) = sample_pmbp_with(params, end, &tables, &ctx, rng, opts)?;
        let mut full = observed.clone();
        full.horizon = end;
        for (dst, src) in full.events.iter_mut().zip(&future.events) {
            dst.extend_from_slice(src);
        }
        let ev = Evaluator::new(params, &full, &tables)?;
        let comp: Vec<Vec<f64>> = ev.points(boundaries)?.into_iter().map(|v| v.compensator).collect();
        Ok(comp.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect())
    });
    summarize(&per_sample, boundaries, params.d, failed, n_samples)
}

/// Expected counts per interval by sampling every dimension past the
/// training horizon and counting events.
pub fn predict_counts_by_sampling(
    params: &ModelParams,
    data: &Dataset,
    boundaries: &[f64],
    n_samples: usize,
    seed: u64,
    grid: &ConvGrid,
) -> Result<Forecast> {
    forecast_inputs(params, data, boundaries, grid)?;
    let tables = compute_h(params, grid, DEFAULT_GAMMA_H)?;
    let ctx = BoundContext::new(params, &tables);
    let observed = data.history();
    let end = *boundaries.last().unwrap();
    let (per_sample, failed) = run_samples(n_samples, seed, |rng| {
        let opts = SampleOptions { start: data.horizon, initial: Some(&observed), ..Default::default() };
        let (future, _) = sample_pmbp_with(params, end, &tables, &ctx, rng, opts)?;
        let counts: Vec<Vec<u64>> = future.events.iter().map(|ev| bin_counts(ev, boundaries)).collect();
        Ok((0..boundaries.len() - 1).map(|q| counts.iter().map(|c| c[q] as f64).collect()).collect())
    });
    summarize(&per_sample, boundaries, params.d, failed, n_samples)
}
