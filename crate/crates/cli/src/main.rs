//! `pmbp` command-line tool: sampling, censoring, fitting, evaluation,
//! prediction, recovery experiments and goodness-of-fit diagnostics.
//!
//! Every subcommand accepts `--config` (JSON whose fields the flags
//! override), `--seed`, `--out` and `--threads`. Machine output goes to
//! `--out` or stdout; progress and warnings go to stderr.

mod io;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pmbp::conv::ConvGrid;
use pmbp::data::censor;
use pmbp::data::Dataset;
use pmbp::fit::{fit, recovery_experiment, summarize_recovery, FitConfig, RecoveryConfig};
use pmbp::gof::gof_report;
use pmbp::gradient::{fd_gradient, grad_nll, max_rel_discrepancy};
use pmbp::hawkes::sample_hawkes;
use pmbp::likelihood::{total_nll, LikelihoodConfig};
use pmbp::model::ModelParams;
use pmbp::sampling::{predict_counts, predict_counts_by_sampling, sample_pmbp_with, BoundContext, BoundMode, SampleOptions};
use pmbp::{conv, eval, rng};
use serde::Deserialize;

use crate::io::{csv_string, emit, fmt_f64, read_dataset, read_events, read_json, to_json};

#[derive(Parser)]
#[command(name = "pmbp", version, about = "Partial mean behavior Poisson processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (all cores when absent).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a multivariate Hawkes process to event JSONL.
    SampleHawkes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Horizon T.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Sample a PMBP process to event JSONL.
    SamplePmbp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Horizon T.
        #[arg(long)]
        horizon: Option<f64>,
        /// Thinning bound (ub1 or ub2).
        #[arg(long)]
        bound_mode: Option<String>,
    },
    /// Replace timestamps of leading dimensions by window counts.
    Censor {
        #[command(flatten)]
        common: Common,
        /// Event JSONL file.
        #[arg(long)]
        events: Option<PathBuf>,
        /// One-based dimensions to censor, comma separated.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Window width.
        #[arg(long)]
        width: Option<f64>,
    },
    /// Fit parameters to one or more datasets.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset JSON files, fitted jointly.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        /// Convolution grid step.
        #[arg(long)]
        grid_step: Option<f64>,
        /// Number of random starts.
        #[arg(long)]
        n_starts: Option<usize>,
        /// Iteration cap per start.
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Emit intensity and compensator on a regular time grid as CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Spacing of output times (grid step when absent).
        #[arg(long)]
        output_step: Option<f64>,
    },
    /// Forecast expected counts per interval past the data horizon as CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// End of the forecast range.
        #[arg(long)]
        end: Option<f64>,
        /// Interval width.
        #[arg(long)]
        width: Option<f64>,
        /// Number of Monte-Carlo samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Estimator: compensator or sampling.
        #[arg(long)]
        method: Option<String>,
    },
    /// Parameter-recovery experiment on simulated Hawkes sequences.
    Recover {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of sequences.
        #[arg(long)]
        sequences: Option<usize>,
        /// Sequences per joint fit.
        #[arg(long)]
        group_size: Option<usize>,
        /// Horizon of each sequence.
        #[arg(long)]
        horizon: Option<f64>,
        /// Censoring widths, comma separated.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
        /// Summary CSV path (next to `--out` when absent).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Goodness-of-fit report as JSON.
    Gof {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Poisson draws per window for the fit score.
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients per parameter as CSV.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Finite-difference step.
        #[arg(long)]
        fd_step: Option<f64>,
    },
}

/// Model parameters and grid.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Model parameter JSON file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Convolution grid step.
    #[arg(long)]
    grid_step: Option<f64>,
}

/// Observed data.
#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset JSON file.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Fields a `--config` file may set; each is overridden by its flag.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    params: Option<ModelParams>,
    seed: Option<u64>,
    horizon: Option<f64>,
    grid_step: Option<f64>,
    bound_mode: Option<BoundMode>,
    events: Option<PathBuf>,
    data: Option<Vec<PathBuf>>,
    dims: Option<Vec<usize>>,
    width: Option<f64>,
    end: Option<f64>,
    samples: Option<usize>,
    method: Option<String>,
    draws: Option<usize>,
    fd_step: Option<f64>,
    output_step: Option<f64>,
    fit: Option<FitConfig>,
    likelihood: Option<LikelihoodConfig>,
    recovery: Option<RecoveryConfig>,
}

struct Ctx {
    cfg: FileConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        if let Some(n) = common.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
        }
        let cfg: FileConfig = match &common.config {
            Some(p) => read_json(p)?,
            None => FileConfig::default(),
        };
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        Ok(Ctx { cfg, seed, out: common.out.clone() })
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn params(&self, model: &ModelArgs) -> Result<ModelParams> {
        let p = match (&model.params, &self.cfg.params) {
            (Some(path), _) => read_json::<ModelParams>(path)?,
            (None, Some(p)) => p.clone(),
            (None, None) => bail!("model parameters required (--params or config \"params\")"),
        };
        p.validate()?;
        Ok(p)
    }

    fn grid(&self, model: &ModelArgs, params: &ModelParams, horizon: f64) -> Result<ConvGrid> {
        Ok(match model.grid_step.or(self.cfg.grid_step) {
            Some(step) => ConvGrid::covering(horizon, step)?,
            None => ConvGrid::default_for(params, horizon)?,
        })
    }

    fn dataset(&self, data: &DataArgs) -> Result<Dataset> {
        let path = data.data.clone().or_else(|| self.cfg.data.as_ref().and_then(|v| v.first().cloned()));
        read_dataset(&path.context("dataset required (--data or config \"data\")")?)
    }

    fn likelihood(&self) -> LikelihoodConfig {
        self.cfg.likelihood.clone().unwrap_or_default()
    }
}

fn parse_bound_mode(s: &str) -> Result<BoundMode> {
    match s {
        "ub1" => Ok(BoundMode::Ub1),
        "ub2" => Ok(BoundMode::Ub2),
        other => bail!("unknown bound mode {other:?} (expected ub1 or ub2)"),
    }
}

fn warn_regularity(params: &ModelParams) {
    let r = pmbp::model::check_subcriticality(params);
    if !r.subcritical {
        eprintln!("warning: fitted branching matrix is not subcritical (rho_EE {:.4}, rho_EcEc {:.4})", r.rho_ee, r.rho_ecec);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SampleHawkes { common, model, horizon } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let horizon = horizon.or(ctx.cfg.horizon).context("--horizon required")?;
            let h = sample_hawkes(&params, horizon, ctx.seed)?;
            eprintln!("sampled {} events", h.total());
            emit(ctx.out(), &io::events_to_jsonl(&h)?)
        }
        Command::SamplePmbp { common, model, horizon, bound_mode } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let horizon = horizon.or(ctx.cfg.horizon).context("--horizon required")?;
            let mode = match bound_mode {
                Some(s) => parse_bound_mode(&s)?,
                None => ctx.cfg.bound_mode.unwrap_or_default(),
            };
            let grid = ctx.grid(&model, &params, horizon)?;
            let tables = conv::compute_h(&params, &grid, conv::DEFAULT_GAMMA_H)?;
            let bounds = BoundContext::new(&params, &tables);
            let opts = SampleOptions { mode, ..Default::default() };
            let (h, stats) = sample_pmbp_with(&params, horizon, &tables, &bounds, &mut rng::stream_rng(ctx.seed, 0), opts)?;
            eprintln!("sampled {} events, acceptance ratio {:.4}", h.total(), stats.acceptance_ratio());
            emit(ctx.out(), &io::events_to_jsonl(&h)?)
        }
        Command::Censor { common, events, dims, width } => {
            let ctx = Ctx::new(&common)?;
            let path = events.or(ctx.cfg.events.clone()).context("--events required")?;
            let h = read_events(&path)?;
            let dims = dims.or(ctx.cfg.dims.clone()).context("--dims required")?;
            if dims.contains(&0) {
                bail!("dimensions are one-based");
            }
            let zero_based: Vec<usize> = dims.iter().map(|d| d - 1).collect();
            let width = width.or(ctx.cfg.width).context("--width required")?;
            emit(ctx.out(), &io::dataset_to_json(&censor(&h, &zero_based, width)?)?)
        }
        Command::Fit { common, data, grid_step, n_starts, max_iter } => {
            let ctx = Ctx::new(&common)?;
            let paths = if data.is_empty() { ctx.cfg.data.clone().unwrap_or_default() } else { data };
            if paths.is_empty() {
                bail!("at least one --data file required");
            }
            let datasets = paths.iter().map(|p| read_dataset(p)).collect::<Result<Vec<_>>>()?;
            let mut cfg = ctx.cfg.fit.clone().unwrap_or_default();
            cfg.seed = common.seed.or(ctx.cfg.seed).unwrap_or(cfg.seed);
            if let Some(n) = n_starts {
                cfg.n_starts = n;
            }
            if let Some(n) = max_iter {
                cfg.max_iter = n;
            }
            if let Some(l) = &ctx.cfg.likelihood {
                cfg.likelihood = l.clone();
            }
            let horizon = datasets.iter().map(|d| d.horizon).fold(0.0, f64::max);
            let step = grid_step.or(ctx.cfg.grid_step).unwrap_or((horizon / 100.0).min(0.05));
            let res = fit(&datasets, &cfg, &ConvGrid::covering(horizon, step)?)?;
            eprintln!("best NLL {:.6} in {:.2} s", res.nll, res.wall_time);
            warn_regularity(&res.params);
            emit(ctx.out(), &to_json(&res)?)
        }
        Command::Evaluate { common, model, data, output_step } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let data = ctx.dataset(&data)?;
            let grid = ctx.grid(&model, &params, data.horizon)?;
            let tables = conv::compute_h(&params, &grid, conv::DEFAULT_GAMMA_H)?;
            let ev = eval::Evaluator::new(&params, &data.history(), &tables)?;
            let step = output_step.or(ctx.cfg.output_step).unwrap_or(grid.step);
            let n = (data.horizon / step + 1e-9).floor() as usize;
            let mut rows = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let t = (k as f64 * step).min(data.horizon);
                let v = ev.point(t)?;
                let mut row = vec![fmt_f64(t)];
                row.extend(v.xi.iter().chain(&v.compensator).map(|&x| fmt_f64(x)));
                rows.push(row);
            }
            let mut header = vec!["t".to_string()];
            header.extend((1..=params.d).map(|i| format!("xi_{i}")));
            header.extend((1..=params.d).map(|i| format!("Xi_{i}")));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            emit(ctx.out(), &csv_string(&header, &rows)?)
        }
        Command::Predict { common, model, data, end, width, samples, method } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let data = ctx.dataset(&data)?;
            let end = end.or(ctx.cfg.end).context("--end required")?;
            let width = width.or(ctx.cfg.width).unwrap_or(1.0);
            let boundaries = forecast_boundaries(data.horizon, end, width)?;
            let n = samples.or(ctx.cfg.samples).unwrap_or(1000);
            let grid = ctx.grid(&model, &params, end)?;
            let f = match method.or(ctx.cfg.method.clone()).as_deref().unwrap_or("compensator") {
                "compensator" => predict_counts(&params, &data, &boundaries, n, ctx.seed, &grid)?,
                "sampling" => predict_counts_by_sampling(&params, &data, &boundaries, n, ctx.seed, &grid)?,
                other => bail!("unknown method {other:?} (expected compensator or sampling)"),
            };
            if f.needs_warning() {
                eprintln!("warning: {} of {} samples failed and were dropped", f.failed, f.n_samples);
            }
            let rows: Vec<Vec<String>> = f
                .rows
                .iter()
                .map(|r| vec![fmt_f64(r.interval_start), fmt_f64(r.interval_end), r.dim.to_string(), fmt_f64(r.mean), fmt_f64(r.sd)])
                .collect();
            emit(ctx.out(), &csv_string(&["interval_start", "interval_end", "dim", "mean", "sd"], &rows)?)
        }
        Command::Recover { common, model, sequences, group_size, horizon, widths, summary } => {
            let ctx = Ctx::new(&common)?;
            let truth = ctx.params(&model)?;
            let mut cfg = ctx.cfg.recovery.clone().unwrap_or_default();
            cfg.seed = ctx.seed;
            cfg.n_sequences = sequences.unwrap_or(cfg.n_sequences);
            cfg.group_size = group_size.unwrap_or(cfg.group_size);
            cfg.horizon = horizon.or(ctx.cfg.horizon).unwrap_or(cfg.horizon);
            cfg.censor_widths = widths.unwrap_or(cfg.censor_widths);
            cfg.grid_step = model.grid_step.or(ctx.cfg.grid_step).unwrap_or(cfg.grid_step);
            let rows = recovery_experiment(&truth, &cfg)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![r.param_name.clone(), fmt_f64(r.true_value), r.likelihood_mode.clone(), r.group_index.to_string(), fmt_f64(r.estimate)]
                })
                .collect();
            emit(ctx.out(), &csv_string(&RECOVERY_HEADER, &table)?)?;
            let summary_path = summary.or_else(|| ctx.out().map(|p| p.with_extension("summary.csv")));
            let summary_rows: Vec<Vec<String>> = summarize_recovery(&rows)
                .iter()
                .map(|s| {
                    vec![
                        s.param_name.clone(),
                        s.likelihood_mode.clone(),
                        fmt_f64(s.true_value),
                        fmt_f64(s.mean),
                        fmt_f64(s.median),
                        fmt_f64(s.q25),
                        fmt_f64(s.q75),
                        fmt_f64(s.iqr),
                    ]
                })
                .collect();
            match summary_path {
                Some(p) => emit(Some(&p), &csv_string(&SUMMARY_HEADER, &summary_rows)?),
                None => {
                    eprintln!("summary not written: pass --summary or --out");
                    Ok(())
                }
            }
        }
        Command::Gof { common, model, data, draws } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let data = ctx.dataset(&data)?;
            let grid = ctx.grid(&model, &params, data.horizon)?;
            let report = gof_report(&params, &data, &grid, draws.or(ctx.cfg.draws).unwrap_or(2000), ctx.seed)?;
            emit(ctx.out(), &to_json(&report)?)
        }
        Command::GradCheck { common, model, data, fd_step } => {
            let ctx = Ctx::new(&common)?;
            let params = ctx.params(&model)?;
            let data = ctx.dataset(&data)?;
            let grid = ctx.grid(&model, &params, data.horizon)?;
            let lik = ctx.likelihood();
            let step = fd_step.or(ctx.cfg.fd_step).unwrap_or(1e-5);
            let analytic = grad_nll(&params, &data, &lik, &grid)?;
            let numeric = fd_gradient(|x| total_nll(&params.with_free_vec(x), &data, &lik, &grid), &params.to_free_vec(), step)?;
            let errs = max_rel_discrepancy(&analytic, &numeric, 1e-6);
            let rows: Vec<Vec<String>> = params
                .free_ids()
                .iter()
                .enumerate()
                .map(|(k, id)| vec![id.name(), fmt_f64(analytic[k]), fmt_f64(numeric[k]), fmt_f64(errs[k])])
                .collect();
            eprintln!("max relative discrepancy {:.3e}", errs.iter().copied().fold(0.0, f64::max));
            emit(ctx.out(), &csv_string(&["param", "analytic", "finite_difference", "rel_error"], &rows)?)
        }
    }
}

/// Columns of the `recover` estimates table.
const RECOVERY_HEADER: [&str; 5] = ["param_name", "true_value", "likelihood_mode", "group_index", "estimate"];
/// Columns of the `recover` summary table.
const SUMMARY_HEADER: [&str; 8] = ["param_name", "likelihood_mode", "true_value", "mean", "median", "q25", "q75", "iqr"];

/// `start, start + w, ...` up to `end`, the last interval clipped.
fn forecast_boundaries(start: f64, end: f64, width: f64) -> Result<Vec<f64>> {
    if !(end > start) || !(width > 0.0) {
        bail!("forecast needs end > data horizon and a positive width");
    }
    let n = ((end - start) / width - 1e-9).ceil() as usize;
    let mut b: Vec<f64> = (0..n).map(|k| start + k as f64 * width).collect();
    b.push(end);
    Ok(b)
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forecast_intervals() {
        assert_eq!(forecast_boundaries(10.0, 13.0, 1.0).unwrap(), vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(forecast_boundaries(10.0, 12.5, 1.0).unwrap(), vec![10.0, 11.0, 12.0, 12.5]);
        assert!(forecast_boundaries(10.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
