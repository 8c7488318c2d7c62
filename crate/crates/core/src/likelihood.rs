//! Negative log-likelihood of partially interval-censored data: Poisson
//! interval terms for the censored dimensions, point-process terms for the
//! timestamped ones, optional per-dimension weights and an ℓ1 penalty on `ν`.
//!
//! `ξ` and `Ξ` are evaluated exactly at the points of interest (timestamps,
//! censoring boundaries and the horizon) instead of being read off the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{compute_h, ConvGrid, HTables, DEFAULT_GAMMA_H};
use crate::data::{CensoredSeries, Dataset};
use crate::error::{PmbpError, Result};
use crate::eval::Evaluator;
use crate::model::ModelParams;

/// Default floor applied to log arguments.
pub const DEFAULT_EPS: f64 = 1e-10;

/// Weights, penalty and numerical floor of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Per-dimension weights; empty means all ones.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Coefficient of the `‖ν‖₁` penalty.
    #[serde(default)]
    pub nu_penalty: f64,
    /// Floor for log arguments.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Truncation threshold of the `h_E` series.
    #[serde(default = "default_gamma_h")]
    pub gamma_h: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_gamma_h() -> f64 {
    DEFAULT_GAMMA_H
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { weights: Vec::new(), nu_penalty: 0.0, eps: DEFAULT_EPS, gamma_h: DEFAULT_GAMMA_H }
    }
}

impl LikelihoodConfig {
    /// Weight of dimension `j`.
    pub fn weight(&self, j: usize) -> f64 {
        self.weights.get(j).copied().unwrap_or(1.0)
    }

    /// Checks the floor, penalty and weight count.
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.eps > 0.0) || !(self.gamma_h > 0.0) {
            return Err(PmbpError::InvalidParams("eps and gamma_h must be positive".into()));
        }
        if !(self.nu_penalty >= 0.0) || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(PmbpError::InvalidParams("weights and penalty must be non-negative".into()));
        }
        if !self.weights.is_empty() && self.weights.len() != d {
            return Err(PmbpError::Dimension(format!("{} weights for {d} dimensions", self.weights.len())));
        }
        Ok(())
    }
}

/// Why a time is in the point-of-interest set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Event timestamp of the given observed dimension.
    Timestamp(usize),
    /// Censoring boundary of the given censored dimension.
    Boundary(usize),
    /// Node of the convolution grid.
    GridPoint,
}

/// A time together with all roles it plays.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOfInterest {
    /// Time.
    pub t: f64,
    /// Roles, in insertion order.
    pub roles: Vec<Role>,
}

/// Timestamps, boundaries, the horizon (as a boundary of every observed
/// dimension) and, optionally, grid nodes; sorted with duplicates merged.
pub fn points_of_interest(data: &Dataset, grid: Option<&ConvGrid>) -> Vec<PointOfInterest> {
    let mut raw: Vec<(f64, Role)> = Vec::new();
    for (j, c) in data.counts.iter().enumerate() {
        raw.extend(c.boundaries.iter().map(|&o| (o, Role::Boundary(j))));
    }
    for j in data.e..data.dim() {
        raw.extend(data.events[j].iter().map(|&t| (t, Role::Timestamp(j))));
        raw.push((data.horizon, Role::Boundary(j)));
    }
    if let Some(g) = grid {
        raw.extend((0..=g.n).map(|p| (g.t(p), Role::GridPoint)));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<PointOfInterest> = Vec::new();
    for (t, role) in raw {
        match out.last_mut() {
            Some(last) if last.t == t => {
                if !last.roles.contains(&role) {
                    last.roles.push(role);
                }
            }
            _ => out.push(PointOfInterest { t, roles: vec![role] }),
        }
    }
    out
}

/// Interval-censored Poisson term `Σ_k [ΔΞ_k − C_k log max(ΔΞ_k, ε)]`.
///
/// `comp[k]` is the compensator at boundary `k`.
pub fn icll(counts: &CensoredSeries, comp: &[f64], eps: f64) -> Result<f64> {
    if comp.len() != counts.boundaries.len() {
        return Err(PmbpError::Dimension(format!("{} compensator values for {} boundaries", comp.len(), counts.boundaries.len())));
    }
    let mut total = 0.0;
    for (k, &c) in counts.counts.iter().enumerate() {
        let inc = comp[k + 1] - comp[k];
        if inc < -1e-9 {
            return Err(PmbpError::NumericalConsistency(format!("compensator decreases by {} on window {k}", -inc)));
        }
        total += inc - c as f64 * inc.max(eps).ln();
    }
    Ok(total)
}

/// Point-process term `−Σ log max(ξ(t_k), ε) + Ξ(T)`.
pub fn ppll(xi_at_events: &[f64], comp_at_horizon: f64, eps: f64) -> f64 {
    comp_at_horizon - xi_at_events.iter().map(|x| x.max(eps).ln()).sum::<f64>()
}

/// One query of a dataset: time and the loss coefficients of `ξ` and `Ξ`.
pub(crate) struct Query {
    pub t: f64,
    pub c_xi: Vec<f64>,
    pub c_comp: Vec<f64>,
}

/// Weighted NLL of one dataset (without the `ν` penalty), plus the linear
/// coefficients of the loss in `ξ`, `Ξ` at each query when requested.
pub(crate) fn dataset_terms(ev: &Evaluator, data: &Dataset, cfg: &LikelihoodConfig, with_coefs: bool) -> Result<(f64, Vec<Query>)> {
    let d = data.dim();
    let e = data.e;
    let pois = points_of_interest(data, None);
    let values = ev.points(&pois.iter().map(|p| p.t).collect::<Vec<_>>())?;
    let mut xi_events: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    let mut comp_bounds: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for (q, (poi, v)) in pois.iter().zip(&values).enumerate() {
        for role in &poi.roles {
            match *role {
                Role::Timestamp(j) => xi_events[j].push((q, v.xi[j])),
                Role::Boundary(j) => comp_bounds[j].push((q, v.compensator[j])),
                Role::GridPoint => {}
            }
        }
    }
    let mut queries: Vec<Query> = if with_coefs {
        pois.iter().map(|p| Query { t: p.t, c_xi: vec![0.0; d], c_comp: vec![0.0; d] }).collect()
    } else {
        Vec::new()
    };
    let mut nll = 0.0;
    for j in 0..d {
        let w = cfg.weight(j);
        if j < e {
            let comp: Vec<f64> = comp_bounds[j].iter().map(|x| x.1).collect();
            nll += w * icll(&data.counts[j], &comp, cfg.eps)?;
            if with_coefs {
                for (k, &c) in data.counts[j].counts.iter().enumerate() {
                    let inc = comp[k + 1] - comp[k];
                    let coef = if inc > cfg.eps { w * (1.0 - c as f64 / inc) } else { w };
                    queries[comp_bounds[j][k + 1].0].c_comp[j] += coef;
                    queries[comp_bounds[j][k].0].c_comp[j] -= coef;
                }
            }
        } else {
            let xs: Vec<f64> = xi_events[j].iter().map(|x| x.1).collect();
            let (qt, comp_t) = comp_bounds[j][0];
            nll += w * ppll(&xs, comp_t, cfg.eps);
            if with_coefs {
                queries[qt].c_comp[j] += w;
                for &(q, x) in &xi_events[j] {
                    if x > cfg.eps {
                        queries[q].c_xi[j] -= w / x;
                    }
                }
            }
        }
    }
    Ok((nll, queries))
}

pub(crate) fn validate_inputs(params: &ModelParams, datasets: &[Dataset], cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<()> {
    params.validate()?;
    cfg.validate(params.d)?;
    for data in datasets {
        data.validate(params.d, params.e)?;
        if data.horizon > grid.horizon() * (1.0 + 1e-9) {
            return Err(PmbpError::Domain(format!("grid ends at {} before the horizon {}", grid.horizon(), data.horizon)));
        }
        if data.counts.iter().any(|c| c.boundaries.last().copied().unwrap_or(0.0) > grid.horizon() * (1.0 + 1e-9)) {
            return Err(PmbpError::Domain("a censoring boundary lies beyond the grid".into()));
        }
    }
    Ok(())
}

/// Tables for `params` on `grid`; fails for ρ(α^{EE}) ≥ 1.
pub(crate) fn tables_for(params: &ModelParams, cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<HTables> {
    compute_h(params, grid, cfg.gamma_h)
}

pub(crate) fn nu_penalty(params: &ModelParams, cfg: &LikelihoodConfig) -> f64 {
    cfg.nu_penalty * params.nu.iter().sum::<f64>()
}

/// Negative log-likelihood of one dataset.
pub fn total_nll(params: &ModelParams, data: &Dataset, cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<f64> {
    joint_nll(params, std::slice::from_ref(data), cfg, grid)
}

/// Sum of per-dataset negative log-likelihoods, sharing one table build;
/// the `ν` penalty is added once.
pub fn joint_nll(params: &ModelParams, datasets: &[Dataset], cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<f64> {
    validate_inputs(params, datasets, cfg, grid)?;
    let tables = tables_for(params, cfg, grid)?;
    let parts: Vec<f64> = datasets
        .par_iter()
        .map(|data| {
            let ev = Evaluator::new(params, &data.history(), &tables)?;
            Ok(dataset_terms(&ev, data, cfg, false)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() + nu_penalty(params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{censor, EventHistory};
    use crate::hawkes::{pp_loglik, sample_hawkes};
    use proptest::prelude::*;

    fn unit_windows(counts: Vec<u64>) -> CensoredSeries {
        CensoredSeries { boundaries: (0..=counts.len()).map(|k| k as f64).collect(), counts }
    }

    #[test]
    fn icll_constant_rate() {
        let s = unit_windows(vec![3; 5]);
        let comp: Vec<f64> = (0..=5).map(|k| 2.0 * k as f64).collect();
        let v = icll(&s, &comp, DEFAULT_EPS).unwrap();
        assert!((v - 5.0 * (2.0 - 3.0 * 2f64.ln())).abs() < 1e-12);
        let zero = unit_windows(vec![0; 5]);
        assert_eq!(icll(&zero, &comp, DEFAULT_EPS).unwrap(), 10.0);
    }

    #[test]
    fn icll_rejects_decreasing_compensator() {
        let s = unit_windows(vec![1, 1]);
        assert!(matches!(icll(&s, &[0.0, 1.0, 0.5], DEFAULT_EPS), Err(PmbpError::NumericalConsistency(_))));
    }

    proptest! {
        #[test]
        fn icll_matches_scalar_poisson_oracle(incs in prop::collection::vec(0.01f64..5.0, 1..30), seed in 0u64..1000) {
            let counts: Vec<u64> = incs.iter().enumerate().map(|(k, _)| (seed + k as u64 * 7) % 6).collect();
            let s = unit_windows(counts.clone());
            let mut comp = vec![0.0];
            for x in &incs {
                comp.push(comp.last().unwrap() + x);
            }
            let oracle: f64 = incs.iter().zip(&counts).map(|(&m, &c)| m - c as f64 * m.ln()).sum();
            prop_assert!((icll(&s, &comp, DEFAULT_EPS).unwrap() - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn ppll_examples() {
        assert_eq!(ppll(&[], 3.5, DEFAULT_EPS), 3.5);
        let v = ppll(&[2.0; 4], 2.0 * 10.0, DEFAULT_EPS);
        assert!((v - (-4.0 * 2f64.ln() + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn points_of_interest_merge_roles() {
        let h = EventHistory::new(3.0, vec![vec![0.5, 2.0], vec![1.0, 2.0]]).unwrap();
        let data = censor(&h, &[0], 1.0).unwrap();
        let pois = points_of_interest(&data, Some(&ConvGrid::new(0.5, 6).unwrap()));
        let ts: Vec<f64> = pois.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(pois[2].roles, vec![Role::Boundary(0), Role::Timestamp(1), Role::GridPoint]);
        assert_eq!(pois[6].roles, vec![Role::Boundary(0), Role::Boundary(1), Role::GridPoint]);
    }

    #[test]
    fn hawkes_reduction() {
        let p = ModelParams::new(0, vec![vec![1.0, 2.0], vec![0.5, 1.5]], vec![vec![0.3, 0.2], vec![0.1, 0.4]], vec![0.0; 2], vec![0.7, 0.3]).unwrap();
        let h = sample_hawkes(&p, 40.0, 9).unwrap();
        let data = Dataset::from_history(&h);
        let grid = ConvGrid::covering(40.0, 0.1).unwrap();
        let v = total_nll(&p, &data, &LikelihoodConfig::default(), &grid).unwrap();
        let want = pp_loglik(&p, &h, 40.0).unwrap();
        assert!((v - want).abs() <= 1e-8 * want.abs(), "{v} vs {want}");
    }

    #[test]
    fn nu_penalty_is_linear() {
        let p = ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![0.5; 2]; 2], vec![0.0; 2], vec![1.0, 2.0]).unwrap();
        let h = EventHistory::new(10.0, vec![vec![0.5, 3.0, 3.2], vec![1.0, 4.0, 8.0]]).unwrap();
        let data = censor(&h, &[0], 1.0).unwrap();
        let grid = ConvGrid::covering(10.0, 0.05).unwrap();
        let base = total_nll(&p, &data, &LikelihoodConfig::default(), &grid).unwrap();
        let cfg = LikelihoodConfig { nu_penalty: 10.0, ..Default::default() };
        let pen = total_nll(&p, &data, &cfg, &grid).unwrap();
        assert!((pen - base - 30.0).abs() < 1e-9);
    }

    #[test]
    fn constant_rate_icll_is_minimized_at_empirical_rate() {
        let counts = vec![3, 0, 5, 2, 1, 4, 2, 3, 0, 1];
        let total: u64 = counts.iter().sum();
        let s = unit_windows(counts);
        let nll = |nu: f64| icll(&s, &(0..=10).map(|k| nu * k as f64).collect::<Vec<_>>(), DEFAULT_EPS).unwrap();
        let best = (1..400).map(|k| k as f64 * 0.01).min_by(|a, b| nll(*a).total_cmp(&nll(*b))).unwrap();
        assert!((best - total as f64 / 10.0).abs() < 0.011);
    }

    #[test]
    fn joint_nll_is_additive() {
        let p = ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![0.5; 2]; 2], vec![0.0; 2], vec![0.5, 0.5]).unwrap();
        let grid = ConvGrid::covering(20.0, 0.05).unwrap();
        let mk = |seed| censor(&sample_hawkes(&p, 20.0, seed).unwrap(), &[0], 1.0).unwrap();
        let (a, b) = (mk(1), mk(2));
        let cfg = LikelihoodConfig::default();
        let single = total_nll(&p, &a, &cfg, &grid).unwrap();
        assert_eq!(joint_nll(&p, &[a.clone()], &cfg, &grid).unwrap(), single);
        assert_eq!(joint_nll(&p, &[a.clone(), a.clone()], &cfg, &grid).unwrap(), 2.0 * single);
        let ab = joint_nll(&p, &[a.clone(), b.clone()], &cfg, &grid).unwrap();
        let ba = joint_nll(&p, &[b, a], &cfg, &grid).unwrap();
        assert!((ab - ba).abs() <= 1e-12 * ab.abs());
    }

    #[test]
    fn refinement_changes_nll_little() {
        let p = ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![0.5; 2]; 2], vec![0.0; 2], vec![0.5, 0.5]).unwrap();
        let data = censor(&sample_hawkes(&p, 30.0, 4).unwrap(), &[0], 1.0).unwrap();
        let cfg = LikelihoodConfig::default();
        let coarse = total_nll(&p, &data, &cfg, &ConvGrid::covering(30.0, 0.01).unwrap()).unwrap();
        let fine = total_nll(&p, &data, &cfg, &ConvGrid::covering(30.0, 0.001).unwrap()).unwrap();
        assert!((coarse - fine).abs() <= 1e-3 * fine.abs(), "{coarse} vs {fine}");
    }

    #[test]
    fn horizon_compensator_converges_at_first_order() {
        let p = ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![0.5; 2]; 2], vec![0.0; 2], vec![0.5, 0.5]).unwrap();
        let h = sample_hawkes(&p, 30.0, 4).unwrap();
        let v: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&s| {
                let tables = compute_h(&p, &ConvGrid::covering(30.0, s).unwrap(), DEFAULT_GAMMA_H).unwrap();
                Evaluator::new(&p, &h, &tables).unwrap().point(30.0).unwrap().compensator[0]
            })
            .collect();
        assert!((v[2] - v[1]).abs() <= 0.65 * (v[1] - v[0]).abs(), "{v:?}");
    }

    #[test]
    fn supercritical_censored_block_is_refused() {
        let p = ModelParams::new(1, vec![vec![1.0; 2]; 2], vec![vec![1.2, 0.1], vec![0.1, 0.1]], vec![0.0; 2], vec![0.5; 2]).unwrap();
        let data = censor(&EventHistory::new(5.0, vec![vec![1.0], vec![2.0]]).unwrap(), &[0], 1.0).unwrap();
        let r = total_nll(&p, &data, &LikelihoodConfig::default(), &ConvGrid::covering(5.0, 0.05).unwrap());
        assert!(matches!(r, Err(PmbpError::NotSubcritical(_))));
    }
}
