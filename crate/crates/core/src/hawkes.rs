//! Multivariate Hawkes intensity, compensator, likelihood and thinning samplers.
//!
//! Exponential kernels admit an exact recursion: for each pair `(i, j)` the
//! accumulator `S^{ij}(t) = Σ_{t^j_k < t} exp(-θ^{ij}(t - t^j_k))` decays by
//! `exp(-θ^{ij} Δt)` between events and jumps by one at each source event.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::EventHistory;
use crate::error::{PmbpError, Result};
use crate::model::ModelParams;
use crate::rng::stream_rng;

/// Default cap on accepted events per sampled realization.
pub const DEFAULT_EVENT_CAP: usize = 1_000_000;

/// Per-pair decaying accumulators of an exponential-kernel Hawkes process.
#[derive(Debug, Clone)]
pub struct HawkesState<'a> {
    params: &'a ModelParams,
    /// Current time.
    pub t: f64,
    acc: Vec<f64>,
    counts: Vec<usize>,
}

impl<'a> HawkesState<'a> {
    /// State at time 0 with no events.
    pub fn new(params: &'a ModelParams) -> Self {
        let d = params.d;
        HawkesState { params, t: 0.0, acc: vec![0.0; d * d], counts: vec![0; d] }
    }

    /// Moves the clock forward to `t`, decaying every accumulator.
    pub fn advance(&mut self, t: f64) {
        let dt = t - self.t;
        if dt > 0.0 {
            let d = self.params.d;
            for i in 0..d {
                for j in 0..d {
                    let a = &mut self.acc[i * d + j];
                    if *a != 0.0 {
                        *a *= (-self.params.theta[i][j] * dt).exp();
                    }
                }
            }
            self.t = t;
        }
    }

    /// Registers an event of source dimension `j` at the current time.
    pub fn add_event(&mut self, j: usize) {
        let d = self.params.d;
        for i in 0..d {
            self.acc[i * d + j] += 1.0;
        }
        self.counts[j] += 1;
    }

    /// Excitation of target `i` from source `j` at the current time.
    pub fn excitation(&self, i: usize, j: usize) -> f64 {
        let d = self.params.d;
        self.params.alpha[i][j] * self.params.theta[i][j] * self.acc[i * d + j]
    }

    /// Intensity of dimension `i` at the current time (registered events count as past).
    pub fn intensity(&self, i: usize) -> f64 {
        self.params.nu[i] + (0..self.params.d).map(|j| self.excitation(i, j)).sum::<f64>()
    }

    /// Compensator of dimension `i` at the current time.
    pub fn compensator(&self, i: usize) -> f64 {
        let p = self.params;
        let d = p.d;
        let impulse = if self.t > 0.0 { p.gamma[i] } else { 0.0 };
        impulse
            + p.nu[i] * self.t
            + (0..d).map(|j| p.alpha[i][j] * (self.counts[j] as f64 - self.acc[i * d + j])).sum::<f64>()
    }
}

/// All events of a history merged chronologically as `(time, dim)` pairs.
pub fn merged_events(history: &EventHistory) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> =
        history.events.iter().enumerate().flat_map(|(j, ev)| ev.iter().map(move |&t| (t, j))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

fn check_dims(params: &ModelParams, history: &EventHistory) -> Result<()> {
    if history.dim() != params.d {
        return Err(PmbpError::Dimension(format!("history has {} dimensions, model {}", history.dim(), params.d)));
    }
    Ok(())
}

/// State after every event strictly before `t`, advanced to `t`.
fn state_at<'a>(params: &'a ModelParams, history: &EventHistory, t: f64) -> Result<HawkesState<'a>> {
    if !(t >= 0.0) {
        return Err(PmbpError::Domain(format!("evaluation time {t} must be non-negative")));
    }
    check_dims(params, history)?;
    let mut st = HawkesState::new(params);
    for (s, j) in merged_events(history) {
        if s >= t {
            break;
        }
        st.advance(s);
        st.add_event(j);
    }
    st.advance(t);
    Ok(st)
}

/// Conditional intensity `λ(t)`; only events strictly before `t` contribute.
pub fn hawkes_intensity(params: &ModelParams, history: &EventHistory, t: f64) -> Result<Vec<f64>> {
    let st = state_at(params, history, t)?;
    Ok((0..params.d).map(|i| st.intensity(i)).collect())
}

/// Compensator `Λ(t)` including the impulse mass for `t > 0`.
pub fn hawkes_compensator(params: &ModelParams, history: &EventHistory, t: f64) -> Result<Vec<f64>> {
    let st = state_at(params, history, t)?;
    Ok((0..params.d).map(|i| st.compensator(i)).collect())
}

/// Compensator of dimension `dim` at ascending `times`, in one pass.
pub fn hawkes_compensator_path(params: &ModelParams, history: &EventHistory, dim: usize, times: &[f64]) -> Result<Vec<f64>> {
    check_dims(params, history)?;
    let events = merged_events(history);
    let mut st = HawkesState::new(params);
    let mut k = 0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        while k < events.len() && events[k].0 < t {
            st.advance(events[k].0);
            st.add_event(events[k].1);
            k += 1;
        }
        st.advance(t);
        out.push(st.compensator(dim));
    }
    Ok(out)
}

/// Point-process negative log-likelihood `-Σ_j [Σ_k log λ^j(t^j_k) - Λ^j(T)]`.
pub fn pp_loglik(params: &ModelParams, history: &EventHistory, horizon: f64) -> Result<f64> {
    check_dims(params, history)?;
    let events = merged_events(history);
    if events.last().is_some_and(|&(t, _)| t >= horizon) {
        return Err(PmbpError::Domain("events must precede the horizon".into()));
    }
    let mut st = HawkesState::new(params);
    let mut nll = 0.0;
    let mut k = 0;
    while k < events.len() {
        let t = events[k].0;
        st.advance(t);
        let mut end = k;
        while end < events.len() && events[end].0 == t {
            let j = events[end].1;
            let lam = st.intensity(j);
            if !(lam > 0.0) {
                return Err(PmbpError::Evaluation(format!("intensity {lam} at event t = {t} in dimension {j}")));
            }
            nll -= lam.ln();
            end += 1;
        }
        for &(_, j) in &events[k..end] {
            st.add_event(j);
        }
        k = end;
    }
    st.advance(horizon);
    nll += (0..params.d).map(|i| st.compensator(i)).sum::<f64>();
    Ok(nll)
}

/// Picks index `i` with probability proportional to `weights[i]`, given `u * total`.
pub(crate) fn invert_cumulative(weights: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Next representable time strictly after the last event of a dimension.
pub(crate) fn strictly_after(t: f64, last: Option<&f64>) -> f64 {
    match last {
        Some(&l) if t <= l => l.next_up(),
        _ => t,
    }
}

/// Ogata thinning on `[0, T)` with the default event cap.
pub fn sample_hawkes(params: &ModelParams, horizon: f64, seed: u64) -> Result<EventHistory> {
    sample_hawkes_with(params, horizon, &mut stream_rng(seed, 0), DEFAULT_EVENT_CAP)
}

/// Ogata thinning driven by a caller-supplied generator.
///
/// The bound is the total intensity just after the last accepted event or
/// rejected proposal; exponential kernels only decay in between. The impulse
/// `γ` is never drawn as events.
pub fn sample_hawkes_with(params: &ModelParams, horizon: f64, rng: &mut ChaCha8Rng, cap: usize) -> Result<EventHistory> {
    params.validate()?;
    let d = params.d;
    let mut out = EventHistory::empty(d, horizon);
    let mut st = HawkesState::new(params);
    let mut accepted = 0usize;
    let mut lam: Vec<f64> = (0..d).map(|i| st.intensity(i)).collect();
    loop {
        let bound: f64 = lam.iter().sum();
        if !(bound > 0.0) {
            break;
        }
        let u: f64 = rng.random();
        let t = st.t - (1.0 - u).ln() / bound;
        if t >= horizon {
            break;
        }
        st.advance(t);
        lam = (0..d).map(|i| st.intensity(i)).collect();
        let total: f64 = lam.iter().sum();
        let v: f64 = rng.random::<f64>() * bound;
        if v < total {
            let j = invert_cumulative(&lam, v);
            let tj = strictly_after(t, out.events[j].last());
            out.events[j].push(tj);
            st.add_event(j);
            accepted += 1;
            if accepted > cap {
                return Err(PmbpError::Explosion(cap));
            }
            lam = (0..d).map(|i| st.intensity(i)).collect();
        }
    }
    Ok(out)
}

/// Samples the censored dimensions `0..e` on `[0, T)` given fixed observed
/// timestamps in dimensions `e..d`, with the default event cap.
///
/// The returned history holds sampled events in `0..e` and the observed
/// events in `e..d`.
pub fn sample_conditional_hawkes(params: &ModelParams, observed: &EventHistory, horizon: f64, seed: u64) -> Result<EventHistory> {
    sample_conditional_hawkes_with(params, observed, horizon, &mut stream_rng(seed, 0), DEFAULT_EVENT_CAP, &mut |_, _, _| {})
}

/// Conditional thinning with a caller-supplied generator.
///
/// Bound: `Σ_{i∈E} [ν^i + Σ_{j∈E^c} |H^j_T| φ^{ij}(0) + Σ_{j∈E} Σ_{t_k ≤ t} φ^{ij}(t - t_k)]`.
/// `probe(t, bound, intensity)` is called at every proposal.
pub fn sample_conditional_hawkes_with(
    params: &ModelParams,
    observed: &EventHistory,
    horizon: f64,
    rng: &mut ChaCha8Rng,
    cap: usize,
    probe: &mut dyn FnMut(f64, f64, f64),
) -> Result<EventHistory> {
    params.validate()?;
    check_dims(params, observed)?;
    let (d, e) = (params.d, params.e);
    let mut out = EventHistory::empty(d, horizon);
    for j in e..d {
        out.events[j] = observed.events[j].iter().copied().filter(|&t| t < horizon).collect();
        if observed.events[j].iter().any(|&t| t >= horizon) {
            return Err(PmbpError::Domain("observed events must precede the horizon".into()));
        }
    }
    if e == 0 {
        return Ok(out);
    }
    let static_part: f64 = (0..e)
        .map(|i| params.nu[i] + (e..d).map(|j| out.events[j].len() as f64 * params.phi(i, j, 0.0)).sum::<f64>())
        .sum();
    let obs = merged_events(&out);
    let mut k_obs = 0usize;
    let mut st = HawkesState::new(params);
    let mut accepted = 0usize;
    let mut t = 0.0;
    let self_part = |st: &HawkesState| -> f64 { (0..e).map(|i| (0..e).map(|j| st.excitation(i, j)).sum::<f64>()).sum() };
    let mut bound = static_part;
    loop {
        if !(bound > 0.0) {
            break;
        }
        let u: f64 = rng.random();
        t -= (1.0 - u).ln() / bound;
        if t >= horizon {
            break;
        }
        while k_obs < obs.len() && obs[k_obs].0 < t {
            st.advance(obs[k_obs].0);
            st.add_event(obs[k_obs].1);
            k_obs += 1;
        }
        st.advance(t);
        let lam: Vec<f64> = (0..e).map(|i| st.intensity(i)).collect();
        let total: f64 = lam.iter().sum();
        probe(t, bound, total);
        let v: f64 = rng.random::<f64>() * bound;
        if v < total {
            let j = invert_cumulative(&lam, v);
            let tj = strictly_after(t, out.events[j].last());
            out.events[j].push(tj);
            st.add_event(j);
            accepted += 1;
            if accepted > cap {
                return Err(PmbpError::Explosion(cap));
            }
        }
        bound = static_part + self_part(&st);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use proptest::prelude::*;

    fn uni(nu: f64, alpha: f64, theta: f64) -> ModelParams {
        ModelParams::new(0, vec![vec![theta]], vec![vec![alpha]], vec![0.0], vec![nu]).unwrap()
    }

    /// Direct O(n) summation used as an independent oracle.
    fn naive_intensity(p: &ModelParams, h: &EventHistory, t: f64) -> Vec<f64> {
        (0..p.d)
            .map(|i| {
                p.nu[i]
                    + (0..p.d)
                        .map(|j| h.events[j].iter().filter(|&&s| s < t).map(|&s| p.phi(i, j, t - s)).sum::<f64>())
                        .sum::<f64>()
            })
            .collect()
    }

    fn naive_nll(p: &ModelParams, h: &EventHistory, horizon: f64) -> f64 {
        let mut nll = 0.0;
        for j in 0..p.d {
            for &t in &h.events[j] {
                nll -= naive_intensity(p, h, t)[j].ln();
            }
            nll += p.gamma[j] + p.nu[j] * horizon;
            for k in 0..p.d {
                nll += h.events[k].iter().map(|&s| p.phi_integral(j, k, horizon - s)).sum::<f64>();
            }
        }
        nll
    }

    #[test]
    fn intensity_examples() {
        let p = uni(1.0, 0.5, 1.0);
        let empty = EventHistory::empty(1, 10.0);
        assert_eq!(hawkes_intensity(&p, &empty, 3.0).unwrap(), vec![1.0]);
        let h = EventHistory::new(10.0, vec![vec![0.0]]).unwrap();
        let lam = hawkes_intensity(&p, &h, 1.0).unwrap()[0];
        assert!((lam - (1.0 + 0.5 * (-1.0f64).exp())).abs() < 1e-14);
        assert!((lam - 1.1839).abs() < 1e-4);
        let p0 = uni(2.0, 0.0, 1.0);
        assert_eq!(hawkes_intensity(&p0, &h, 0.5).unwrap(), vec![2.0]);
        assert!(matches!(hawkes_intensity(&p, &h, -1.0), Err(PmbpError::Domain(_))));
    }

    #[test]
    fn intensity_excludes_simultaneous_event() {
        let p = uni(1.0, 0.5, 1.0);
        let h = EventHistory::new(10.0, vec![vec![2.0]]).unwrap();
        assert_eq!(hawkes_intensity(&p, &h, 2.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn compensator_examples() {
        let p = uni(1.0, 0.0, 1.0);
        assert_eq!(hawkes_compensator(&p, &EventHistory::empty(1, 10.0), 5.0).unwrap(), vec![5.0]);
        let p = uni(0.0, 0.5, 1.0);
        let h = EventHistory::new(1e3, vec![vec![0.0]]).unwrap();
        assert!((hawkes_compensator(&p, &h, 500.0).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compensator_difference_matches_intensity() {
        let p = ModelParams::new(
            0,
            vec![vec![1.0, 2.0], vec![0.5, 1.5]],
            vec![vec![0.3, 0.2], vec![0.1, 0.4]],
            vec![0.0; 2],
            vec![0.7, 0.4],
        )
        .unwrap();
        let h = EventHistory::new(10.0, vec![vec![0.3, 1.1, 4.0], vec![0.8, 2.2]]).unwrap();
        let dt = 1e-4;
        for k in 0..50 {
            let t = 0.05 + 0.19 * k as f64;
            let (a, b) = (hawkes_compensator(&p, &h, t).unwrap(), hawkes_compensator(&p, &h, t + dt).unwrap());
            let lam = hawkes_intensity(&p, &h, t + dt / 2.0).unwrap();
            for i in 0..2 {
                let fd = (b[i] - a[i]) / dt;
                assert!((fd - lam[i]).abs() <= 1e-4 * lam[i], "t={t} fd={fd} lam={}", lam[i]);
            }
        }
    }

    #[test]
    fn pp_loglik_examples() {
        let p = uni(2.0, 0.0, 1.0);
        let h = EventHistory::new(5.0, vec![vec![0.5, 1.0, 3.0]]).unwrap();
        let expect = -3.0 * 2.0f64.ln() + 10.0;
        assert!((pp_loglik(&p, &h, 5.0).unwrap() - expect).abs() < 1e-12);
        let p = uni(0.5, 0.3, 1.0);
        let empty = EventHistory::empty(1, 5.0);
        let lam_t = hawkes_compensator(&p, &empty, 5.0).unwrap()[0];
        assert!((pp_loglik(&p, &empty, 5.0).unwrap() - lam_t).abs() < 1e-12);
        let p0 = uni(0.0, 0.3, 1.0);
        assert!(matches!(pp_loglik(&p0, &h, 5.0), Err(PmbpError::Evaluation(_))));
    }

    #[test]
    fn sample_hawkes_poisson_mean() {
        let p = uni(2.0, 0.0, 1.0);
        let n = 200;
        let counts: Vec<f64> = (0..n).map(|s| sample_hawkes(&p, 50.0, s).unwrap().total() as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let se = (100.0f64 / n as f64).sqrt();
        assert!((mean - 100.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sample_hawkes_empty_without_background() {
        let p = uni(0.0, 0.5, 1.0);
        assert_eq!(sample_hawkes(&p, 50.0, 3).unwrap().total(), 0);
    }

    #[test]
    fn sample_hawkes_is_reproducible() {
        let p = uni(1.0, 0.5, 1.0);
        assert_eq!(sample_hawkes(&p, 50.0, 9).unwrap(), sample_hawkes(&p, 50.0, 9).unwrap());
    }

    #[test]
    fn sample_hawkes_explosion_guard() {
        let p = uni(1.0, 1.5, 1.0);
        let r = sample_hawkes_with(&p, 1e4, &mut stream_rng(1, 0), 1000);
        assert_eq!(r, Err(PmbpError::Explosion(1000)));
    }

    fn pair(e: usize, alpha: Vec<Vec<f64>>) -> ModelParams {
        ModelParams::new(e, vec![vec![1.0, 2.0], vec![0.5, 1.0]], alpha, vec![0.0; 2], vec![0.8, 0.5]).unwrap()
    }

    #[test]
    fn conditional_sampler_ignores_uncoupled_observations() {
        let p = pair(1, vec![vec![0.0, 0.0], vec![0.4, 0.3]]);
        let obs = EventHistory::new(40.0, vec![vec![], (0..30).map(|k| k as f64 + 0.5).collect()]).unwrap();
        let n = 300;
        let mean = (0..n)
            .map(|s| sample_conditional_hawkes(&p, &obs, 40.0, s).unwrap().events[0].len() as f64)
            .sum::<f64>()
            / n as f64;
        let se = (0.8 * 40.0 / n as f64).sqrt();
        assert!((mean - 32.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn conditional_bound_dominates() {
        let p = pair(1, vec![vec![0.5, 0.4], vec![0.4, 0.3]]);
        let obs = EventHistory::new(30.0, vec![vec![], vec![1.0, 1.1, 1.2, 7.0, 20.0]]).unwrap();
        for seed in 0..20 {
            let mut violations = 0;
            let mut probe = |_t: f64, bound: f64, lam: f64| {
                if lam > bound * (1.0 + 1e-12) {
                    violations += 1;
                }
            };
            sample_conditional_hawkes_with(&p, &obs, 30.0, &mut stream_rng(seed, 0), DEFAULT_EVENT_CAP, &mut probe).unwrap();
            assert_eq!(violations, 0);
        }
    }

    #[test]
    fn conditional_sampler_without_observed_dims_matches_hawkes_counts() {
        let p = ModelParams::new(2, vec![vec![1.0; 2]; 2], vec![vec![0.2, 0.1], vec![0.1, 0.3]], vec![0.0; 2], vec![1.0, 0.5]).unwrap();
        let obs = EventHistory::empty(2, 30.0);
        let n = 300;
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        let mut var = [0.0; 2];
        for s in 0..n {
            let x = sample_conditional_hawkes(&p, &obs, 30.0, s).unwrap();
            let y = sample_hawkes(&p, 30.0, 10_000 + s).unwrap();
            for i in 0..2 {
                a[i] += x.events[i].len() as f64;
                b[i] += y.events[i].len() as f64;
                var[i] += (y.events[i].len() as f64).powi(2);
            }
        }
        for i in 0..2 {
            let (ma, mb) = (a[i] / n as f64, b[i] / n as f64);
            let sd = (var[i] / n as f64 - mb * mb).sqrt();
            let se = sd * (2.0 / n as f64).sqrt();
            assert!((ma - mb).abs() < 3.0 * se, "dim {i}: {ma} vs {mb}");
        }
    }

    proptest! {
        #[test]
        fn intensity_matches_naive_sum(
            ev0 in prop::collection::btree_set(0u32..1000, 0..30),
            ev1 in prop::collection::btree_set(0u32..1000, 0..30),
            t in 0.0f64..10.0,
            a in prop::collection::vec(0.0f64..0.5, 4),
            th in prop::collection::vec(0.1f64..3.0, 4),
        ) {
            let p = ModelParams::new(0, vec![th[..2].to_vec(), th[2..].to_vec()], vec![a[..2].to_vec(), a[2..].to_vec()], vec![0.0; 2], vec![0.3, 0.6]).unwrap();
            let h = EventHistory::new(10.0, vec![ev0.iter().map(|&x| x as f64 / 100.0).collect(), ev1.iter().map(|&x| x as f64 / 100.0).collect()]).unwrap();
            let fast = hawkes_intensity(&p, &h, t).unwrap();
            let slow = naive_intensity(&p, &h, t);
            for i in 0..2 {
                prop_assert!((fast[i] - slow[i]).abs() <= 1e-10 * slow[i]);
            }
            let nll = pp_loglik(&p, &h, 10.0).unwrap();
            let oracle = naive_nll(&p, &h, 10.0);
            prop_assert!((nll - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }

        #[test]
        fn compensator_increment_approaches_intensity(
            ev in prop::collection::btree_set(0u32..1000, 0..20),
            t in 0.0f64..9.0,
        ) {
            let p = uni(0.7, 0.4, 1.3);
            let h = EventHistory::new(10.0, vec![ev.iter().map(|&x| x as f64 / 100.0).collect()]).unwrap();
            let step = 1e-5;
            prop_assume!(h.events[0].iter().all(|&s| (s - t).abs() > 2.0 * step));
            let fd = (hawkes_compensator(&p, &h, t + step).unwrap()[0] - hawkes_compensator(&p, &h, t).unwrap()[0]) / step;
            let lam = hawkes_intensity(&p, &h, t + step / 2.0).unwrap()[0];
            prop_assert!((fd - lam).abs() <= 1e-3 * lam);
        }
    }
}
