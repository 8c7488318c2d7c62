//! Monte-Carlo estimate of the PMBP intensity: average the Hawkes intensity
//! over sampled histories of the censored dimensions, conditional on the
//! observed timestamps.

use rayon::prelude::*;

use crate::data::EventHistory;
use crate::error::{PmbpError, Result};
use crate::hawkes::{merged_events, sample_conditional_hawkes_with, HawkesState, DEFAULT_EVENT_CAP};
use crate::model::ModelParams;
use crate::rng::stream_rng;

/// Pointwise mean and standard error, indexed `[point][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    /// Sample mean of the intensity.
    pub mean: Vec<Vec<f64>>,
    /// Standard error of the mean.
    pub std_err: Vec<Vec<f64>>,
}

/// Hawkes intensity of `history` at ascending `times` (events strictly before each time).
pub fn intensity_path(params: &ModelParams, history: &EventHistory, times: &[f64]) -> Vec<Vec<f64>> {
    let events = merged_events(history);
    let mut st = HawkesState::new(params);
    let mut k = 0;
    times
        .iter()
        .map(|&t| {
            while k < events.len() && events[k].0 < t {
                st.advance(events[k].0);
                st.add_event(events[k].1);
                k += 1;
            }
            st.advance(t);
            (0..params.d).map(|i| st.intensity(i)).collect()
        })
        .collect()
}

/// Monte-Carlo estimate of `ξ` at `points` from `n_samples` conditional
/// Hawkes histories; sample `s` uses RNG stream `s` of `seed`.
pub fn xi_monte_carlo(
    params: &ModelParams,
    observed: &EventHistory,
    points: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(PmbpError::Domain("n_samples must be at least 1".into()));
    }
    if points.windows(2).any(|w| w[0] > w[1]) || points.iter().any(|&t| !(t >= 0.0)) {
        return Err(PmbpError::Domain("points must be non-negative and ascending".into()));
    }
    let last = points.last().copied().unwrap_or(0.0);
    let horizon = last.next_up().max(f64::MIN_POSITIVE);
    let obs = observed.truncated(horizon);
    let paths: Vec<Vec<Vec<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let hist = sample_conditional_hawkes_with(params, &obs, horizon, &mut rng, DEFAULT_EVENT_CAP, &mut |_, _, _| {})?;
            Ok(intensity_path(params, &hist, points))
        })
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let d = params.d;
    let mut mean = vec![vec![0.0; d]; points.len()];
    let mut std_err = vec![vec![0.0; d]; points.len()];
    for (q, (m_row, se_row)) in mean.iter_mut().zip(std_err.iter_mut()).enumerate() {
        for i in 0..d {
            let mu = paths.iter().map(|p| p[q][i]).sum::<f64>() / n;
            m_row[i] = mu;
            if n_samples > 1 {
                let var = paths.iter().map(|p| (p[q][i] - mu).powi(2)).sum::<f64>() / (n - 1.0);
                se_row[i] = (var / n).sqrt();
            }
        }
    }
    Ok(McEstimate { mean, std_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pmbp21(alpha: f64) -> ModelParams {
        ModelParams::new(1, vec![vec![1.0, 1.0], vec![0.2, 0.5]], vec![vec![alpha; 2]; 2], vec![0.0; 2], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn no_excitation_gives_background() {
        let p = pmbp21(0.0);
        let obs = EventHistory::new(10.0, vec![vec![], vec![2.5, 5.0]]).unwrap();
        let est = xi_monte_carlo(&p, &obs, &[0.0, 1.0, 6.0], 50, 3).unwrap();
        for q in 0..3 {
            assert_eq!(est.mean[q], vec![0.5, 0.5]);
            assert_eq!(est.std_err[q], vec![0.0, 0.0]);
        }
    }

    #[test]
    fn std_err_scales_with_sample_count() {
        let p = pmbp21(0.5);
        let obs = EventHistory::new(10.0, vec![vec![], vec![2.5, 5.0]]).unwrap();
        let points: Vec<f64> = (1..=10).map(f64::from).collect();
        let mean_se = |n| {
            let est = xi_monte_carlo(&p, &obs, &points, n, 11).unwrap();
            est.std_err.iter().map(|r| r[0]).sum::<f64>() / points.len() as f64
        };
        let ratio = mean_se(4000) / mean_se(2000);
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() <= 0.2 * std::f64::consts::FRAC_1_SQRT_2, "ratio {ratio}");
    }

    #[test]
    fn estimate_is_deterministic() {
        let p = pmbp21(0.5);
        let obs = EventHistory::new(10.0, vec![vec![], vec![2.5]]).unwrap();
        assert_eq!(xi_monte_carlo(&p, &obs, &[3.0, 8.0], 100, 5).unwrap(), xi_monte_carlo(&p, &obs, &[3.0, 8.0], 100, 5).unwrap());
    }
}
