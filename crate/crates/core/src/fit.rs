//! Box-constrained maximum-likelihood estimation: projected limited-memory
//! quasi-Newton iterations from several starts, plus the parameter-recovery
//! experiment that fits grouped synthetic sequences.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Distribution, Median, OrderStatistics};

use crate::conv::ConvGrid;
use crate::data::{censor, Dataset};
use crate::error::{PmbpError, Result};
use crate::gradient::nll_and_grad;
use crate::hawkes::{sample_hawkes_with, DEFAULT_EVENT_CAP};
use crate::likelihood::{joint_nll, LikelihoodConfig};
use crate::model::{check_subcriticality, spectral_radius, ModelParams, ParamId, RegularityReport};
use crate::rng::stream_rng;

/// Number of stored curvature pairs.
const MEMORY: usize = 10;
/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
/// Backtracking shrink factor.
const SHRINK: f64 = 0.5;
/// Maximum backtracking steps per line search.
const MAX_BACKTRACK: usize = 40;

/// How the optimizer obtains gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Reverse-mode analytic gradient.
    Analytic,
    /// Central finite differences of the objective.
    FiniteDifference,
}

/// Box bounds per parameter family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Upper bound of every `α` entry (lower bound 0).
    pub alpha_max: f64,
    /// Lower bound of every `θ` entry.
    pub theta_min: f64,
    /// Upper bound of every `θ` entry.
    pub theta_max: f64,
    /// Upper bound of every `ν` entry; `None` means 10³ times the data scale.
    pub nu_max: Option<f64>,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { alpha_max: 5.0, theta_min: 1e-3, theta_max: 1e3, nu_max: None }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Parameter box.
    pub bounds: Bounds,
    /// Number of random starts; one heuristic start is always added.
    pub n_starts: usize,
    /// Iteration cap per start.
    pub max_iter: usize,
    /// Gradient source.
    pub gradient: GradientMode,
    /// Relative NLL change below which a start stops.
    pub nll_tol: f64,
    /// Projected-gradient sup-norm below which a start stops.
    pub pg_tol: f64,
    /// Seed of the start generator.
    pub seed: u64,
    /// Fixed impulse `γ`; empty means zeros.
    pub gamma: Vec<f64>,
    /// Objective settings.
    pub likelihood: LikelihoodConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            bounds: Bounds::default(),
            n_starts: 8,
            max_iter: 500,
            gradient: GradientMode::Analytic,
            nll_tol: 1e-7,
            pg_tol: 1e-5,
            seed: 0,
            gamma: Vec::new(),
            likelihood: LikelihoodConfig::default(),
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let ok = b.alpha_max >= 0.0 && b.theta_min > 0.0 && b.theta_min <= b.theta_max && b.nu_max.is_none_or(|v| v >= 0.0);
        if !ok {
            return Err(PmbpError::InvalidParams("inconsistent bounds".into()));
        }
        if self.n_starts == 0 {
            return Err(PmbpError::InvalidParams("n_starts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why a start stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Projected gradient below tolerance.
    ProjectedGradient,
    /// Relative NLL change below tolerance.
    NllTolerance,
    /// Iteration cap reached.
    MaxIterations,
    /// No sufficient decrease along the steepest-descent direction.
    LineSearchFailed,
    /// The objective could not be evaluated at the start point.
    Failed(String),
}

/// Outcome of one start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    /// Initial free-parameter vector.
    pub start: Vec<f64>,
    /// Final free-parameter vector.
    pub end: Vec<f64>,
    /// Final NLL (infinite when the start failed).
    pub final_nll: f64,
    /// Accepted iterations.
    pub iterations: usize,
    /// Stop reason.
    pub termination: Termination,
}

/// Best parameters over all starts with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Minimizer with the lowest NLL.
    pub params: ModelParams,
    /// Its NLL.
    pub nll: f64,
    /// Per-start summaries, heuristic start first.
    pub starts: Vec<StartSummary>,
    /// Spectral radii of the fitted branching matrix.
    pub regularity: RegularityReport,
    /// Elapsed seconds; excluded from serialized output so results are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

struct Problem<'a> {
    datasets: &'a [Dataset],
    cfg: &'a FitConfig,
    grid: &'a ConvGrid,
    template: ModelParams,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Problem<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        joint_nll(&self.template.with_free_vec(x), self.datasets, &self.cfg.likelihood, self.grid)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.cfg.gradient {
            GradientMode::Analytic => nll_and_grad(&self.template.with_free_vec(x), self.datasets, &self.cfg.likelihood, self.grid),
            GradientMode::FiniteDifference => {
                let f = self.value(x)?;
                let mut y = x.to_vec();
                let mut g = Vec::with_capacity(x.len());
                for i in 0..x.len() {
                    let s = 1e-6 * x[i].abs().max(1.0);
                    let (up, down) = ((x[i] + s).min(self.hi[i]), (x[i] - s).max(self.lo[i]));
                    y[i] = up;
                    let fu = self.value(&y)?;
                    y[i] = down;
                    let fd = self.value(&y)?;
                    y[i] = x[i];
                    g.push((fu - fd) / (up - down));
                }
                Ok((f, g))
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        (0..x.len()).map(|i| ((x[i] - g[i]).clamp(self.lo[i], self.hi[i]) - x[i]).abs()).fold(0.0, f64::max)
    }

    /// Coordinates held at a bound because the gradient pushes outward.
    fn active(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len()).map(|i| (x[i] <= self.lo[i] && g[i] > 0.0) || (x[i] >= self.hi[i] && g[i] < 0.0)).collect()
    }

    fn run(&self, start: Vec<f64>) -> StartSummary {
        let fail = |start: Vec<f64>, msg: String| StartSummary {
            end: start.clone(),
            start,
            final_nll: f64::INFINITY,
            iterations: 0,
            termination: Termination::Failed(msg),
        };
        let mut x = start.clone();
        self.project(&mut x);
        let (mut f, mut g) = match self.value_grad(&x) {
            Ok(v) if v.0.is_finite() => v,
            Ok(v) => return fail(start, format!("non-finite objective {}", v.0)),
            Err(e) => return fail(start, e.to_string()),
        };
        let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut iterations = 0;
        let termination = loop {
            if self.projected_gradient_norm(&x, &g) < self.cfg.pg_tol {
                break Termination::ProjectedGradient;
            }
            if iterations >= self.cfg.max_iter {
                break Termination::MaxIterations;
            }
            let active = self.active(&x, &g);
            let mut step = None;
            for attempt in 0..2 {
                if attempt == 1 {
                    if memory.is_empty() {
                        break;
                    }
                    memory.clear();
                }
                let mut dir = direction(&g, &active, &memory);
                let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
                if !(slope < 0.0) {
                    memory.clear();
                    dir = g.iter().zip(&active).map(|(v, a)| if *a { 0.0 } else { -v }).collect();
                }
                let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if dmax == 0.0 {
                    break;
                }
                let mut t = if memory.is_empty() { (1.0 / dmax).min(1.0) } else { 1.0 };
                for _ in 0..MAX_BACKTRACK {
                    let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                    self.project(&mut trial);
                    let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
                    if let Ok((ft, gt)) = self.value_grad(&trial) {
                        if ft.is_finite() && ft <= f + ARMIJO_C * decrease && decrease < 0.0 {
                            step = Some((trial, ft, gt));
                            break;
                        }
                    }
                    t *= SHRINK;
                }
                if step.is_some() {
                    break;
                }
            }
            let Some((x_new, f_new, g_new)) = step else {
                break Termination::LineSearchFailed;
            };
            iterations += 1;
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            if sy > 1e-10 * norm(&s) * norm(&y) {
                if memory.len() == MEMORY {
                    memory.pop_front();
                }
                memory.push_back((s, y, 1.0 / sy));
            }
            let change = (f - f_new).abs() / f.abs().max(1.0);
            x = x_new;
            f = f_new;
            g = g_new;
            if change < self.cfg.nll_tol {
                break Termination::NllTolerance;
            }
        };
        StartSummary { start, end: x, final_nll: f, iterations, termination }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Two-loop recursion on the free coordinates; active coordinates get zero.
fn direction(g: &[f64], active: &[bool], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(active).map(|(x, a)| if *a { 0.0 } else { *x }).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(active).filter(|(_, a)| !**a).map(|((x, y), _)| x * y).sum() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let scale = dot(s, y) / yy;
            if scale > 0.0 {
                q.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    mask(&q).into_iter().map(|v| -v).collect()
}

/// Mean empirical rate per dimension across datasets.
fn mean_rates(datasets: &[Dataset]) -> Vec<f64> {
    let d = datasets[0].dim();
    let mut out = vec![0.0; d];
    for data in datasets {
        for (o, r) in out.iter_mut().zip(data.empirical_rates()) {
            *o += r / datasets.len() as f64;
        }
    }
    out
}

/// Box for the free vector of a `d`-dimensional model.
fn free_bounds(template: &ModelParams, bounds: &Bounds, datasets: &[Dataset]) -> (Vec<f64>, Vec<f64>) {
    let rates = mean_rates(datasets);
    let shortest = datasets.iter().map(|d| d.horizon).fold(f64::INFINITY, f64::min);
    let scale = rates.iter().copied().fold(1.0 / shortest, f64::max);
    let nu_max = bounds.nu_max.unwrap_or(1e3 * scale);
    template
        .free_ids()
        .iter()
        .map(|id| match id {
            ParamId::Theta(..) => (bounds.theta_min, bounds.theta_max),
            ParamId::Alpha(..) => (0.0, bounds.alpha_max),
            ParamId::Nu(_) => (0.0, nu_max),
        })
        .unzip()
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Heuristic start followed by `n_starts` log-uniform draws from a
/// well-conditioned sub-box (`α ∈ [0.01, 0.9/d]`, `θ ∈ [0.1, 10]`,
/// `ν ∈ [0.1, 2] ×` empirical rate), all clipped to the bounds.
fn starts(template: &ModelParams, cfg: &FitConfig, datasets: &[Dataset], lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let d = template.d;
    let rates: Vec<f64> = mean_rates(datasets).iter().map(|r| r.max(1e-3)).collect();
    let ids = template.free_ids();
    let clip = |x: Vec<f64>| -> Vec<f64> { x.iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])).collect() };
    let mut out = vec![clip(
        ids.iter()
            .map(|id| match id {
                ParamId::Theta(..) => 1.0,
                ParamId::Alpha(..) => 0.5,
                ParamId::Nu(i) => rates[*i],
            })
            .collect(),
    )];
    for k in 0..cfg.n_starts {
        let mut rng = stream_rng(cfg.seed, k as u64);
        let x = ids
            .iter()
            .map(|id| match id {
                ParamId::Theta(..) => log_uniform(&mut rng, 0.1, 10.0),
                ParamId::Alpha(..) => log_uniform(&mut rng, 0.01, 0.9 / d as f64),
                ParamId::Nu(i) => rates[*i] * log_uniform(&mut rng, 0.1, 2.0),
            })
            .collect();
        out.push(clip(x));
    }
    out
}

/// Multi-start projected quasi-Newton minimization of [`joint_nll`].
pub fn fit(datasets: &[Dataset], cfg: &FitConfig, grid: &ConvGrid) -> Result<FitResult> {
    let began = Instant::now();
    cfg.validate()?;
    let first = datasets.first().ok_or_else(|| PmbpError::InsufficientData("no datasets to fit".into()))?;
    let (d, e) = (first.dim(), first.e);
    if datasets.iter().any(|x| x.dim() != d || x.e != e) {
        return Err(PmbpError::Dimension("datasets disagree on the dimension split".into()));
    }
    let gamma = if cfg.gamma.is_empty() { vec![0.0; d] } else { cfg.gamma.clone() };
    let template = ModelParams::new(e, vec![vec![1.0; d]; d], vec![vec![0.0; d]; d], gamma, vec![1.0; d])?;
    let (lo, hi) = free_bounds(&template, &cfg.bounds, datasets);
    let problem = Problem { datasets, cfg, grid, template, lo, hi };
    let summaries: Vec<StartSummary> =
        starts(&problem.template, cfg, datasets, &problem.lo, &problem.hi).into_par_iter().map(|x0| problem.run(x0)).collect();
    let best = summaries
        .iter()
        .enumerate()
        .filter(|(_, s)| s.final_nll.is_finite())
        .min_by(|a, b| a.1.final_nll.total_cmp(&b.1.final_nll).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k);
    let Some(k) = best else {
        let reasons = summaries
            .iter()
            .map(|s| match &s.termination {
                Termination::Failed(m) => m.clone(),
                other => format!("{other:?}"),
            })
            .collect();
        return Err(PmbpError::FitFailure(reasons));
    };
    let params = problem.template.with_free_vec(&summaries[k].end);
    Ok(FitResult {
        regularity: check_subcriticality(&params),
        nll: summaries[k].final_nll,
        params,
        starts: summaries,
        wall_time: began.elapsed().as_secs_f64(),
    })
}

/// Settings of the recovery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    /// Number of simulated sequences.
    pub n_sequences: usize,
    /// Sequences per joint fit.
    pub group_size: usize,
    /// Observation horizon of each sequence.
    pub horizon: f64,
    /// Window widths for censoring the first dimension.
    pub censor_widths: Vec<f64>,
    /// Convolution grid step.
    pub grid_step: f64,
    /// Seed for sampling and fitting.
    pub seed: u64,
    /// Optimizer settings (its seed is overridden per group).
    pub fit: FitConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            n_sequences: 50,
            group_size: 10,
            horizon: 60.0,
            censor_widths: vec![1.0],
            grid_step: 0.05,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

/// One estimate of one parameter in one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    /// Parameter name such as `alpha_12`, or `spectral_radius`.
    pub param_name: String,
    /// Value used for simulation.
    pub true_value: f64,
    /// `PP-PP` or `IC-PP[w]`.
    pub likelihood_mode: String,
    /// Zero-based group index.
    pub group_index: usize,
    /// Fitted value.
    pub estimate: f64,
}

/// Distribution summary of one parameter under one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    /// Parameter name.
    pub param_name: String,
    /// Likelihood mode.
    pub likelihood_mode: String,
    /// Value used for simulation.
    pub true_value: f64,
    /// Mean estimate.
    pub mean: f64,
    /// Median estimate.
    pub median: f64,
    /// First quartile.
    pub q25: f64,
    /// Third quartile.
    pub q75: f64,
    /// Interquartile range.
    pub iqr: f64,
}

/// Simulates Hawkes sequences from `truth` (which must have `e = 0`), fits
/// each group jointly under PP-PP and under IC-PP for each censoring width
/// (first dimension censored), and returns one row per parameter, mode and
/// group, including the spectral radius of `α̂`.
pub fn recovery_experiment(truth: &ModelParams, cfg: &RecoveryConfig) -> Result<Vec<RecoveryRow>> {
    if truth.e != 0 {
        return Err(PmbpError::InvalidParams("recovery needs fully observed true parameters (e = 0)".into()));
    }
    let report = check_subcriticality(truth);
    if !report.subcritical {
        return Err(PmbpError::NotSubcritical(report.rho_ee.max(report.rho_ecec)));
    }
    if cfg.group_size == 0 || cfg.n_sequences < cfg.group_size {
        return Err(PmbpError::InvalidParams("need at least one full group".into()));
    }
    let histories = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|k| sample_hawkes_with(truth, cfg.horizon, &mut stream_rng(cfg.seed, k as u64), DEFAULT_EVENT_CAP))
        .collect::<Result<Vec<_>>>()?;
    let grid = ConvGrid::covering(cfg.horizon, cfg.grid_step)?;
    let true_rho = spectral_radius(&truth.alpha)?;
    let mut modes: Vec<(String, Option<f64>)> = vec![("PP-PP".into(), None)];
    modes.extend(cfg.censor_widths.iter().map(|&w| (format!("IC-PP[{w}]"), Some(w))));
    let mut rows = Vec::new();
    for (mode, width) in &modes {
        for g in 0..cfg.n_sequences / cfg.group_size {
            let group = &histories[g * cfg.group_size..(g + 1) * cfg.group_size];
            let datasets = group
                .iter()
                .map(|h| match width {
                    Some(w) => censor(h, &[0], *w),
                    None => Ok(Dataset::from_history(h)),
                })
                .collect::<Result<Vec<_>>>()?;
            let fit_cfg = FitConfig { seed: cfg.seed.wrapping_add(1 + g as u64), ..cfg.fit.clone() };
            let res = fit(&datasets, &fit_cfg, &grid)?;
            for id in truth.free_ids() {
                rows.push(RecoveryRow {
                    param_name: id.name(),
                    true_value: truth.get(id),
                    likelihood_mode: mode.clone(),
                    group_index: g,
                    estimate: res.params.get(id),
                });
            }
            rows.push(RecoveryRow {
                param_name: "spectral_radius".into(),
                true_value: true_rho,
                likelihood_mode: mode.clone(),
                group_index: g,
                estimate: spectral_radius(&res.params.alpha)?,
            });
        }
    }
    Ok(rows)
}

/// Mean, median and quartiles per (parameter, mode), in first-seen order.
pub fn summarize_recovery(rows: &[RecoveryRow]) -> Vec<RecoverySummary> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.param_name && k.1 == r.likelihood_mode) {
            keys.push((r.param_name.clone(), r.likelihood_mode.clone(), r.true_value));
        }
    }
    keys.into_iter()
        .map(|(param_name, likelihood_mode, true_value)| {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.param_name == param_name && r.likelihood_mode == likelihood_mode).map(|r| r.estimate).collect();
            let mut data = Data::new(vals);
            let (q25, q75) = (data.quantile(0.25), data.quantile(0.75));
            RecoverySummary {
                mean: data.mean().unwrap_or(f64::NAN),
                median: data.median(),
                q25,
                q75,
                iqr: q75 - q25,
                param_name,
                likelihood_mode,
                true_value,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CensoredSeries;
    use crate::hawkes::sample_hawkes;

    fn poisson_counts(total: u64) -> Dataset {
        let counts: Vec<u64> = (0..50).map(|k| if k < (total % 50) as usize { total / 50 + 1 } else { total / 50 }).collect();
        Dataset {
            horizon: 50.0,
            e: 1,
            counts: vec![CensoredSeries { boundaries: (0..=50).map(f64::from).collect(), counts }],
            events: vec![Vec::new()],
        }
    }

    #[test]
    fn poisson_rate_mle() {
        let data = poisson_counts(100);
        let cfg = FitConfig { bounds: Bounds { alpha_max: 0.0, ..Default::default() }, n_starts: 2, ..Default::default() };
        let res = fit(&[data], &cfg, &ConvGrid::covering(50.0, 0.1).unwrap()).unwrap();
        assert!((res.params.nu[0] - 2.0).abs() < 1e-3, "{:?}", res.params.nu);
    }

    #[test]
    fn hawkes_excitation_is_recovered() {
        let truth = ModelParams::new(0, vec![vec![1.0]], vec![vec![0.5]], vec![0.0], vec![1.0]).unwrap();
        let data: Vec<Dataset> = (0..50).map(|s| Dataset::from_history(&sample_hawkes(&truth, 60.0, s).unwrap())).collect();
        let cfg = FitConfig { n_starts: 2, ..Default::default() };
        let res = fit(&data, &cfg, &ConvGrid::covering(60.0, 0.1).unwrap()).unwrap();
        assert!((res.params.alpha[0][0] - 0.5).abs() <= 0.1, "{:?}", res.params);
        let starts: Vec<f64> = res.starts.iter().map(|s| s.final_nll).collect();
        assert_eq!(res.nll, starts.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn refit_from_optimum_is_a_fixed_point() {
        let truth = ModelParams::new(0, vec![vec![1.0]], vec![vec![0.5]], vec![0.0], vec![1.0]).unwrap();
        let data: Vec<Dataset> = (0..5).map(|s| Dataset::from_history(&sample_hawkes(&truth, 60.0, s).unwrap())).collect();
        let grid = ConvGrid::covering(60.0, 0.1).unwrap();
        let cfg = FitConfig { n_starts: 2, ..Default::default() };
        let res = fit(&data, &cfg, &grid).unwrap();
        let template = ModelParams::new(0, vec![vec![1.0]], vec![vec![0.0]], vec![0.0], vec![1.0]).unwrap();
        let (lo, hi) = free_bounds(&template, &cfg.bounds, &data);
        let problem = Problem { datasets: &data, cfg: &cfg, grid: &grid, template, lo, hi };
        let again = problem.run(res.params.to_free_vec());
        assert!((again.final_nll - res.nll).abs() <= cfg.nll_tol * res.nll.abs().max(1.0));
    }

    #[test]
    fn iterates_stay_in_bounds_and_fit_is_deterministic() {
        let truth = ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![0.4; 2]; 2], vec![0.0; 2], vec![0.5; 2]).unwrap();
        let data: Vec<Dataset> = (0..2).map(|s| censor(&sample_hawkes(&truth, 20.0, s).unwrap(), &[0], 1.0).unwrap()).collect();
        let grid = ConvGrid::covering(20.0, 0.1).unwrap();
        let cfg = FitConfig { n_starts: 2, max_iter: 60, seed: 7, ..Default::default() };
        let a = fit(&data, &cfg, &grid).unwrap();
        let b = fit(&data, &cfg, &grid).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let (lo, hi) = free_bounds(&a.params, &cfg.bounds, &data);
        for s in &a.starts {
            for (i, v) in s.end.iter().enumerate() {
                assert!(*v >= lo[i] && *v <= hi[i]);
            }
            assert!(s.final_nll <= joint_nll(&a.params.with_free_vec(&s.start), &data, &cfg.likelihood, &grid).unwrap_or(f64::INFINITY));
        }
    }

    #[test]
    fn degenerate_recovery_emits_one_row_per_quantity() {
        let truth = ModelParams::new(0, vec![vec![1.0]], vec![vec![0.3]], vec![0.0], vec![1.0]).unwrap();
        let cfg = RecoveryConfig {
            n_sequences: 1,
            group_size: 1,
            horizon: 20.0,
            censor_widths: vec![],
            fit: FitConfig { n_starts: 1, ..Default::default() },
            ..Default::default()
        };
        let rows = recovery_experiment(&truth, &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.group_index == 0 && r.likelihood_mode == "PP-PP"));
        assert_eq!(rows[3].param_name, "spectral_radius");
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<RecoveryRow> = [1.0, 2.0, 3.0, 4.0, 10.0]
            .iter()
            .enumerate()
            .map(|(g, &v)| RecoveryRow {
                param_name: "a".into(),
                true_value: 2.0,
                likelihood_mode: "PP-PP".into(),
                group_index: g,
                estimate: v,
            })
            .collect();
        let s = &summarize_recovery(&rows)[0];
        assert_eq!((s.mean, s.median), (4.0, 3.0));
        assert!(s.q25 <= 2.0 + 1e-12 && s.q25 >= 1.0 && s.q75 >= 4.0 && s.q75 <= 10.0);
        assert!((s.iqr - (s.q75 - s.q25)).abs() < 1e-15);
    }
}
