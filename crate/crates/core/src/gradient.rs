//! Analytic gradient of the negative log-likelihood over the free parameters
//! (θ row-major, α row-major, ν), plus a central finite-difference checker.
//!
//! The loss is linear in `ξ` at timestamps and `Ξ` at boundaries once its
//! outer derivatives are fixed, so each dataset feeds weighted query points
//! into one reverse-mode accumulator; accumulators are summed across datasets
//! before the single contraction with the `h_E` derivative tables.

use rayon::prelude::*;

use crate::conv::ConvGrid;
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{Evaluator, GradientAccumulator};
use crate::likelihood::{dataset_terms, nu_penalty, tables_for, validate_inputs, LikelihoodConfig};
use crate::model::ModelParams;

/// Joint NLL and its gradient over [`ModelParams::free_ids`].
pub fn nll_and_grad(params: &ModelParams, datasets: &[Dataset], cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<(f64, Vec<f64>)> {
    validate_inputs(params, datasets, cfg, grid)?;
    let tables = tables_for(params, cfg, grid)?;
    let parts: Vec<(f64, GradientAccumulator)> = datasets
        .par_iter()
        .map(|data| {
            let ev = Evaluator::new(params, &data.history(), &tables)?;
            let (nll, queries) = dataset_terms(&ev, data, cfg, true)?;
            let mut acc = ev.accumulator();
            for q in &queries {
                ev.accumulate(q.t, &q.c_xi, &q.c_comp, &mut acc)?;
            }
            Ok((nll, acc))
        })
        .collect::<Result<_>>()?;
    let reference = Evaluator::new(params, &crate::data::EventHistory::empty(params.d, 0.0), &tables)?;
    let mut total = reference.accumulator();
    let mut nll = 0.0;
    for (v, acc) in &parts {
        nll += v;
        total.merge(acc);
    }
    let mut grad = reference.finish(total, cfg.gamma_h)?;
    let d = params.d;
    for g in grad.iter_mut().skip(2 * d * d) {
        *g += cfg.nu_penalty;
    }
    Ok((nll + nu_penalty(params, cfg), grad))
}

/// Gradient of [`crate::likelihood::total_nll`].
pub fn grad_nll(params: &ModelParams, data: &Dataset, cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<Vec<f64>> {
    Ok(nll_and_grad(params, std::slice::from_ref(data), cfg, grid)?.1)
}

/// Gradient of [`crate::likelihood::joint_nll`].
pub fn joint_grad_nll(params: &ModelParams, datasets: &[Dataset], cfg: &LikelihoodConfig, grid: &ConvGrid) -> Result<Vec<f64>> {
    Ok(nll_and_grad(params, datasets, cfg, grid)?.1)
}

/// Central differences `(f(x + s e_i) − f(x − s e_i)) / 2s` per coordinate.
pub fn fd_gradient<F>(objective: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = objective(&x)?;
        x[i] = point[i] - step;
        let down = objective(&x)?;
        x[i] = point[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Worst per-coordinate relative discrepancy `|a − f| / max(|f|, floor)`.
pub fn max_rel_discrepancy(analytic: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    analytic.iter().zip(numeric).map(|(a, f)| (a - f).abs() / f.abs().max(floor)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{censor, CensoredSeries};
    use crate::hawkes::sample_hawkes;
    use crate::likelihood::{joint_nll, total_nll};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn pmbp21(theta: [f64; 4], alpha: [f64; 4], nu: [f64; 2]) -> ModelParams {
        ModelParams::new(
            1,
            vec![vec![theta[0], theta[1]], vec![theta[2], theta[3]]],
            vec![vec![alpha[0], alpha[1]], vec![alpha[2], alpha[3]]],
            vec![0.0; 2],
            nu.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn fd_of_quadratic_and_linear() {
        let g = fd_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = fd_gradient(|x| Ok(2.0 * x[0] - 0.5 * x[1]), &[1.0, 7.0], 0.25).unwrap();
        assert_eq!(g, vec![2.0, -0.5]);
    }

    #[test]
    fn poisson_rate_partial() {
        let counts = vec![2, 0, 3, 1, 4];
        let total: u64 = counts.iter().sum();
        let data = Dataset {
            horizon: 5.0,
            e: 1,
            counts: vec![CensoredSeries { boundaries: (0..=5).map(f64::from).collect(), counts }],
            events: vec![Vec::new()],
        };
        let grid = ConvGrid::covering(5.0, 0.05).unwrap();
        for nu in [0.5, 2.0, total as f64 / 5.0] {
            let p = ModelParams::new(1, vec![vec![1.0]], vec![vec![0.0]], vec![0.0], vec![nu]).unwrap();
            let g = grad_nll(&p, &data, &LikelihoodConfig::default(), &grid).unwrap();
            assert!((g[2] - (5.0 - total as f64 / nu)).abs() < 1e-10, "{g:?}");
        }
    }

    fn random_point(seed: u64) -> ModelParams {
        let mut rng = stream_rng(seed, 0);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        pmbp21(
            [u(0.3, 2.0), u(0.3, 2.0), u(0.3, 2.0), u(0.3, 2.0)],
            [u(0.05, 0.6), u(0.05, 0.6), u(0.05, 0.6), u(0.05, 0.6)],
            [u(0.2, 1.0), u(0.2, 1.0)],
        )
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let truth = pmbp21([1.0, 1.0, 0.2, 0.5], [0.5; 4], [0.5, 0.5]);
        let data = censor(&sample_hawkes(&truth, 15.0, 3).unwrap(), &[0], 1.0).unwrap();
        let grid = ConvGrid::covering(15.0, 0.05).unwrap();
        let cfg = LikelihoodConfig { gamma_h: 1e-12, ..Default::default() };
        for seed in 0..3 {
            let p = random_point(seed);
            let g = grad_nll(&p, &data, &cfg, &grid).unwrap();
            let f = fd_gradient(|x| total_nll(&p.with_free_vec(x), &data, &cfg, &grid), &p.to_free_vec(), 1e-5).unwrap();
            let errs = max_rel_discrepancy(&g, &f, 1e-6);
            assert!(errs.iter().all(|e| *e <= 1e-3), "seed {seed}: {g:?} vs {f:?}");
        }
    }

    #[test]
    fn joint_gradient_is_sum_of_parts() {
        let p = pmbp21([1.0, 1.0, 0.2, 0.5], [0.4; 4], [0.5, 0.6]);
        let grid = ConvGrid::covering(12.0, 0.05).unwrap();
        let sets: Vec<Dataset> = (0..3).map(|s| censor(&sample_hawkes(&p, 12.0, s).unwrap(), &[0], 1.0).unwrap()).collect();
        let cfg = LikelihoodConfig::default();
        let joint = joint_grad_nll(&p, &sets, &cfg, &grid).unwrap();
        let mut sum = vec![0.0; joint.len()];
        for s in &sets {
            for (a, b) in sum.iter_mut().zip(grad_nll(&p, s, &cfg, &grid).unwrap()) {
                *a += b;
            }
        }
        for (a, b) in joint.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn small_descent_steps_decrease_nll() {
        let truth = pmbp21([1.0, 1.0, 0.2, 0.5], [0.5; 4], [0.5, 0.5]);
        let data = censor(&sample_hawkes(&truth, 15.0, 8).unwrap(), &[0], 1.0).unwrap();
        let grid = ConvGrid::covering(15.0, 0.05).unwrap();
        let cfg = LikelihoodConfig::default();
        for seed in 0..20 {
            let p = random_point(100 + seed);
            let (f0, g) = nll_and_grad(&p, std::slice::from_ref(&data), &cfg, &grid).unwrap();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let step = 1e-4 / norm;
            let x: Vec<f64> = p.to_free_vec().iter().zip(&g).map(|(x, g)| x - step * g).collect();
            let f1 = total_nll(&p.with_free_vec(&x), &data, &cfg, &grid).unwrap();
            assert!(f1 < f0, "seed {seed}: {f1} >= {f0}");
        }
    }

    #[test]
    fn penalty_adds_constant_to_nu_partials() {
        let p = pmbp21([1.0, 1.0, 0.2, 0.5], [0.4; 4], [0.5, 0.6]);
        let data = censor(&sample_hawkes(&p, 10.0, 2).unwrap(), &[0], 1.0).unwrap();
        let grid = ConvGrid::covering(10.0, 0.05).unwrap();
        let plain = grad_nll(&p, &data, &LikelihoodConfig::default(), &grid).unwrap();
        let pen = grad_nll(&p, &data, &LikelihoodConfig { nu_penalty: 3.0, ..Default::default() }, &grid).unwrap();
        for (k, (a, b)) in plain.iter().zip(&pen).enumerate() {
            let want = if k >= 8 { a + 3.0 } else { *a };
            assert!((b - want).abs() < 1e-12);
        }
        assert!(joint_nll(&p, &[data], &LikelihoodConfig::default(), &grid).is_ok());
    }
}
