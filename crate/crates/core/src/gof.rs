//! Goodness-of-fit diagnostics: time-rescaling residuals with a
//! Kolmogorov-Smirnov test for timestamped dimensions, Anscombe residuals
//! with a skewness-kurtosis normality test and a Poisson band fit score for
//! censored dimensions.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::conv::{compute_h, ConvGrid};
use crate::data::Dataset;
use crate::error::{PmbpError, Result};
use crate::eval::Evaluator;
use crate::model::ModelParams;
use crate::rng::stream_rng;

/// Residuals with a test statistic and its p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Residuals the test was run on.
    pub residuals: Vec<f64>,
    /// Test statistic.
    pub statistic: f64,
    /// p-value in `[0, 1]`.
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // Small-x series converges faster in the dual form.
        let s = (2.0 * std::f64::consts::PI).sqrt() / x;
        let q = (-std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp();
        let cdf: f64 = s * (1..=20).map(|k| q.powi((2 * k - 1) * (2 * k - 1))).sum::<f64>();
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let sum: f64 = (1..=100).map(|k| {
        let kf = k as f64;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sign * (-2.0 * kf * kf * x * x).exp()
    })
    .sum();
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `samples` against Exp(1) with the asymptotic p-value.
pub fn ks_exponential(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(PmbpError::InsufficientData("no samples for the KS test".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let stat = x
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let f = -(-v.max(0.0)).exp_m1();
            ((k as f64 + 1.0) / n - f).max(f - k as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok((stat, kolmogorov_sf(stat * n.sqrt())))
}

/// Time-rescaling residuals `Ξ(t_{k+1}) − Ξ(t_k)` from the compensator at
/// consecutive events, tested against Exp(1).
pub fn gof_time_rescaling(comp_at_events: &[f64]) -> Result<TestResult> {
    if comp_at_events.len() < 2 {
        return Err(PmbpError::InsufficientData(format!("{} events; need at least 2", comp_at_events.len())));
    }
    let residuals: Vec<f64> = comp_at_events.windows(2).map(|w| w[1] - w[0]).collect();
    let (statistic, p_value) = ks_exponential(&residuals)?;
    Ok(TestResult { residuals, statistic, p_value })
}

fn central_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m = |p: i32| x.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n;
    (m(2), m(3), m(4))
}

/// D'Agostino skewness z-score.
fn skew_z(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (m2, m3, _) = central_moments(x);
    let b2 = m3 / m2.powf(1.5);
    let mut y = b2 * ((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    if y == 0.0 {
        y = 1.0;
    }
    delta * (y / alpha + ((y / alpha).powi(2) + 1.0).sqrt()).ln()
}

/// Anscombe-Glynn kurtosis z-score.
fn kurtosis_z(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (m2, _, m4) = central_moments(x);
    let b2 = m4 / (m2 * m2);
    let mean = 3.0 * (n - 1.0) / (n + 1.0);
    let var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0).powi(2) * (n + 3.0) * (n + 5.0));
    let z = (b2 - mean) / var.sqrt();
    let sqrt_beta1 =
        6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + z * (2.0 / (a - 4.0)).sqrt();
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

/// D'Agostino-Pearson `K²` statistic and its χ²₂ p-value `exp(−K²/2)`.
///
/// Needs at least 8 values; constant data gives `(∞, 0)`.
pub fn skew_kurtosis_test(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 8 {
        return Err(PmbpError::InsufficientData(format!("{} values; the skewness test needs at least 8", x.len())));
    }
    if central_moments(x).0 <= 0.0 {
        return Ok((f64::INFINITY, 0.0));
    }
    let k2 = skew_z(x).powi(2) + kurtosis_z(x).powi(2);
    Ok((k2, (-k2 / 2.0).exp()))
}

/// Anscombe residuals `2(√(C_k + 3/8) − √(ΔΞ_k + 3/8))` with a
/// skewness-kurtosis normality test.
pub fn gof_anscombe(counts: &[u64], increments: &[f64]) -> Result<TestResult> {
    if counts.len() != increments.len() {
        return Err(PmbpError::Dimension(format!("{} counts for {} increments", counts.len(), increments.len())));
    }
    if let Some(k) = increments.iter().position(|&v| !(v > 0.0)) {
        return Err(PmbpError::NumericalConsistency(format!("non-positive compensator increment {} in window {k}", increments[k])));
    }
    let residuals: Vec<f64> =
        counts.iter().zip(increments).map(|(&c, &m)| 2.0 * ((c as f64 + 0.375).sqrt() - (m + 0.375).sqrt())).collect();
    let (statistic, p_value) = skew_kurtosis_test(&residuals)?;
    Ok(TestResult { residuals, statistic, p_value })
}

/// Fraction of windows whose count lies in the empirical [2.5%, 97.5%]
/// band of `n_draws` Poisson(ΔΞ_k) draws; window `k` uses RNG stream `k`.
pub fn fit_score(counts: &[u64], increments: &[f64], n_draws: usize, seed: u64) -> Result<f64> {
    if counts.len() != increments.len() || counts.is_empty() || n_draws == 0 {
        return Err(PmbpError::Dimension("fit score needs matching, non-empty counts and increments".into()));
    }
    let mut hits = 0usize;
    for (k, (&c, &m)) in counts.iter().zip(increments).enumerate() {
        if !(m >= 0.0) {
            return Err(PmbpError::NumericalConsistency(format!("negative compensator increment {m} in window {k}")));
        }
        let (lo, hi) = if m == 0.0 {
            (0.0, 0.0)
        } else {
            let dist = Poisson::new(m).map_err(|e| PmbpError::Evaluation(e.to_string()))?;
            let mut rng = stream_rng(seed, k as u64);
            let mut draws: Vec<f64> = (0..n_draws).map(|_| dist.sample(&mut rng)).collect();
            draws.sort_by(f64::total_cmp);
            let at = |q: f64| draws[(q * (n_draws - 1) as f64).round() as usize];
            (at(0.025), at(0.975))
        };
        if (lo..=hi).contains(&(c as f64)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / counts.len() as f64)
}

/// KS result for one timestamped dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampedGof {
    /// One-based dimension.
    pub dim: usize,
    /// KS statistic.
    pub ks_statistic: f64,
    /// KS p-value.
    pub ks_p_value: f64,
}

/// Diagnostics for one censored dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredGof {
    /// One-based dimension.
    pub dim: usize,
    /// Skewness-kurtosis statistic.
    pub sk_statistic: f64,
    /// Its p-value.
    pub sk_p_value: f64,
    /// Poisson band fit score.
    pub fit_score: f64,
}

/// All diagnostics of a fitted model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    /// One entry per timestamped dimension with at least two events.
    pub timestamped: Vec<TimestampedGof>,
    /// One entry per censored dimension.
    pub censored: Vec<CensoredGof>,
}

/// Runs every diagnostic with the compensator of `params` on `data`.
pub fn gof_report(params: &ModelParams, data: &Dataset, grid: &ConvGrid, n_draws: usize, seed: u64) -> Result<GofReport> {
    data.validate(params.d, params.e)?;
    let tables = compute_h(params, grid, crate::conv::DEFAULT_GAMMA_H)?;
    let ev = Evaluator::new(params, &data.history(), &tables)?;
    let mut report = GofReport { timestamped: Vec::new(), censored: Vec::new() };
    for (j, series) in data.counts.iter().enumerate() {
        let comp: Vec<f64> = ev.points(&series.boundaries)?.into_iter().map(|v| v.compensator[j]).collect();
        let inc: Vec<f64> = comp.windows(2).map(|w| w[1] - w[0]).collect();
        let sk = gof_anscombe(&series.counts, &inc)?;
        report.censored.push(CensoredGof {
            dim: j + 1,
            sk_statistic: sk.statistic,
            sk_p_value: sk.p_value,
            fit_score: fit_score(&series.counts, &inc, n_draws, seed.wrapping_add(j as u64))?,
        });
    }
    for j in data.e..data.dim() {
        if data.events[j].len() < 2 {
            continue;
        }
        let comp: Vec<f64> = ev.points(&data.events[j])?.into_iter().map(|v| v.compensator[j]).collect();
        let ks = gof_time_rescaling(&comp)?;
        report.timestamped.push(TimestampedGof { dim: j + 1, ks_statistic: ks.statistic, ks_p_value: ks.p_value });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hawkes::{hawkes_compensator_path, sample_hawkes};
    use crate::rng::stream_rng;
    use rand_distr::Exp1;

    // Reference values computed with scipy.stats 1.15 (skewtest, kurtosistest,
    // normaltest, kstest and kstwobign).
    const SAMPLE: [f64; 24] = [
        0.3, -1.2, 0.8, 2.5, -0.4, 0.1, 1.7, -2.2, 0.6, 0.05, -0.9, 1.1, 3.4, -0.3, 0.2, 0.45, -1.6, 0.9, 1.3, -0.7, 2.0, 0.0, -0.15, 0.75,
    ];

    #[test]
    fn skew_kurtosis_matches_reference() {
        assert!((skew_z(&SAMPLE) - 0.6953545596714343).abs() < 1e-12);
        assert!((kurtosis_z(&SAMPLE) - 0.7565450851314598).abs() < 1e-12);
        let (k2, p) = skew_kurtosis_test(&SAMPLE).unwrap();
        assert!((k2 - 1.055878429492422).abs() < 1e-12);
        assert!((p - 0.5898192088335252).abs() < 1e-12);
    }

    #[test]
    fn ks_matches_reference() {
        let g = [0.2, 1.5, 0.7, 3.1, 0.05, 0.9, 2.2, 0.4, 1.1, 0.3];
        let (d, p) = ks_exponential(&g).unwrap();
        assert!((d - 0.10341469620859045).abs() < 1e-12);
        assert!((p - 0.9999250792693035).abs() < 1e-9);
        assert!((kolmogorov_sf(1.0) - 0.26999967167735456).abs() < 1e-12);
        assert!((kolmogorov_sf(0.5) - 0.9639452436648751).abs() < 1e-12);
        assert!((kolmogorov_sf(0.3) - 0.9999906941986655).abs() < 1e-12);
    }

    #[test]
    fn poisson_gaps_pass_and_constant_gaps_fail() {
        let mut rng = stream_rng(1, 0);
        let mut t = 0.0;
        let comp: Vec<f64> = (0..500)
            .map(|_| {
                t += <Exp1 as Distribution<f64>>::sample(&Exp1, &mut rng);
                t
            })
            .collect();
        assert!(gof_time_rescaling(&comp).unwrap().p_value >= 0.01);
        let constant: Vec<f64> = (0..500).map(|k| 3.0 * k as f64).collect();
        assert!(gof_time_rescaling(&constant).unwrap().p_value < 1e-6);
        assert!(matches!(gof_time_rescaling(&[1.0]), Err(PmbpError::InsufficientData(_))));
    }

    #[test]
    fn hawkes_residuals_pass_ks() {
        let p = ModelParams::new(0, vec![vec![1.0]], vec![vec![0.5]], vec![0.0], vec![1.0]).unwrap();
        let h = sample_hawkes(&p, 500.0, 5).unwrap();
        let comp0 = hawkes_compensator_path(&p, &h, 0, &h.events[0]).unwrap();
        assert!(h.events[0].len() >= 800);
        assert!(gof_time_rescaling(&comp0).unwrap().p_value >= 0.01);
    }

    fn poisson_windows(rate: f64, m: usize, seed: u64) -> Vec<u64> {
        let dist = Poisson::new(rate).unwrap();
        let mut rng = stream_rng(seed, 0);
        (0..m).map(|_| dist.sample(&mut rng) as u64).collect()
    }

    #[test]
    fn anscombe_residuals() {
        let counts: Vec<u64> = (1..=10).collect();
        let same: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let zero = gof_anscombe(&counts, &same).unwrap();
        assert!(zero.residuals.iter().all(|r| *r == 0.0));
        assert_eq!(zero.p_value, 0.0);
        let counts = poisson_windows(100.0, 120, 2);
        let ok = gof_anscombe(&counts, &[100.0; 120]).unwrap();
        assert!(ok.p_value >= 0.01, "{}", ok.p_value);
        let wrong = gof_anscombe(&counts, &[200.0; 120]).unwrap();
        let mean = wrong.residuals.iter().sum::<f64>() / 120.0;
        assert!(mean.abs() > 3.0 / 120f64.sqrt());
        assert!(matches!(gof_anscombe(&[1], &[0.0]), Err(PmbpError::NumericalConsistency(_))));
    }

    #[test]
    fn fit_score_examples() {
        let inc = vec![50.0; 120];
        let exact: Vec<u64> = inc.iter().map(|m: &f64| m.round() as u64).collect();
        assert!(fit_score(&exact, &inc, 2000, 1).unwrap() > 0.99);
        let far: Vec<u64> = inc.iter().map(|m| (10.0 * m) as u64).collect();
        assert!(fit_score(&far, &inc, 2000, 1).unwrap() < 0.01);
        let sim = poisson_windows(50.0, 120, 7);
        let s = fit_score(&sim, &inc, 2000, 3).unwrap();
        assert!((s - 0.95).abs() <= 0.05, "{s}");
        assert_eq!(fit_score(&sim, &inc, 2000, 3).unwrap(), s);
    }
}
