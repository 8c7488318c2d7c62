//! Event histories, interval-censored counts, datasets and censoring.

use serde::{Deserialize, Serialize};

use crate::error::{PmbpError, Result};

/// Per-dimension sorted event timestamps observed on `[0, horizon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventHistory {
    /// Observation horizon `T`.
    pub horizon: f64,
    /// Timestamps per dimension, strictly ascending.
    pub events: Vec<Vec<f64>>,
}

impl EventHistory {
    /// Empty history with `d` dimensions.
    pub fn empty(d: usize, horizon: f64) -> Self {
        EventHistory { horizon, events: vec![Vec::new(); d] }
    }

    /// Builds and validates a history.
    pub fn new(horizon: f64, events: Vec<Vec<f64>>) -> Result<Self> {
        let h = EventHistory { horizon, events };
        h.validate()?;
        Ok(h)
    }

    /// Number of dimensions.
    pub fn dim(&self) -> usize {
        self.events.len()
    }

    /// Total number of events over all dimensions.
    pub fn total(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// Checks ordering and range of all timestamps.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(PmbpError::Domain(format!("horizon {} must be positive", self.horizon)));
        }
        for (j, ev) in self.events.iter().enumerate() {
            if ev.iter().any(|&t| !(t >= 0.0 && t < self.horizon)) {
                return Err(PmbpError::Domain(format!("dimension {j} has a timestamp outside [0, T)")));
            }
            if ev.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PmbpError::Domain(format!("dimension {j} is not strictly increasing")));
            }
        }
        Ok(())
    }

    /// Events strictly before `t`, with the horizon set to `t`.
    pub fn truncated(&self, t: f64) -> Self {
        EventHistory {
            horizon: t,
            events: self.events.iter().map(|ev| ev.iter().copied().filter(|&s| s < t).collect()).collect(),
        }
    }
}

/// Interval-censored counts of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredSeries {
    /// Observation points `0 = o_0 < o_1 < ... < o_n`.
    pub boundaries: Vec<f64>,
    /// Count on `[o_{k-1}, o_k)` for `k = 1..n`.
    pub counts: Vec<u64>,
}

impl CensoredSeries {
    /// Checks boundary ordering and the count-list length.
    pub fn validate(&self) -> Result<()> {
        if self.boundaries.len() < 2 || self.boundaries[0] != 0.0 {
            return Err(PmbpError::Domain("boundaries must start at 0 and hold at least two points".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PmbpError::Domain("boundaries must be strictly increasing".into()));
        }
        if self.counts.len() + 1 != self.boundaries.len() {
            return Err(PmbpError::Dimension(format!(
                "{} counts for {} boundaries",
                self.counts.len(),
                self.boundaries.len()
            )));
        }
        Ok(())
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Partially interval-censored observation: counts for dimensions `0..e`,
/// timestamps for dimensions `e..d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Horizon `T`.
    pub horizon: f64,
    /// Number of censored dimensions.
    pub e: usize,
    /// Counts of the censored dimensions, indexed `0..e`.
    pub counts: Vec<CensoredSeries>,
    /// Timestamps indexed by global dimension; censored entries are empty.
    pub events: Vec<Vec<f64>>,
}

impl Dataset {
    /// Total number of dimensions.
    pub fn dim(&self) -> usize {
        self.events.len()
    }

    /// Checks consistency with a `(d, e)` split.
    pub fn validate(&self, d: usize, e: usize) -> Result<()> {
        if self.dim() != d || self.e != e || self.counts.len() != e {
            return Err(PmbpError::Dimension(format!(
                "dataset split (d={}, e={}) does not match model (d={d}, e={e})",
                self.dim(),
                self.e
            )));
        }
        self.history().validate()?;
        for (j, c) in self.counts.iter().enumerate() {
            c.validate()?;
            if !self.events[j].is_empty() {
                return Err(PmbpError::Dimension(format!("censored dimension {j} carries timestamps")));
            }
            let last = *c.boundaries.last().unwrap_or(&0.0);
            if last > self.horizon * (1.0 + 1e-12) {
                return Err(PmbpError::Domain(format!("dimension {j} boundary {last} exceeds T")));
            }
        }
        Ok(())
    }

    /// Observed timestamps as an [`EventHistory`].
    pub fn history(&self) -> EventHistory {
        EventHistory { horizon: self.horizon, events: self.events.clone() }
    }

    /// Uncensored dataset from a full history (`e = 0`).
    pub fn from_history(h: &EventHistory) -> Self {
        Dataset { horizon: h.horizon, e: 0, counts: Vec::new(), events: h.events.clone() }
    }

    /// Mean event rate per dimension (count / T).
    pub fn empirical_rates(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let n = if j < self.e { self.counts[j].total() as f64 } else { self.events[j].len() as f64 };
                n / self.horizon
            })
            .collect()
    }
}

/// Window boundaries `0, w, 2w, ...` with the last window clipped to `horizon`.
pub fn window_boundaries(horizon: f64, width: f64) -> Vec<f64> {
    let mut b = vec![0.0];
    let mut k = 1u64;
    loop {
        let o = k as f64 * width;
        if o >= horizon * (1.0 - 1e-12) {
            b.push(horizon);
            return b;
        }
        b.push(o);
        k += 1;
    }
}

/// Counts of sorted `events` on the half-open windows defined by `boundaries`.
pub fn bin_counts(events: &[f64], boundaries: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; boundaries.len().saturating_sub(1)];
    for &t in events {
        let k = boundaries.partition_point(|&o| o <= t);
        if k >= 1 && k < boundaries.len() {
            counts[k - 1] += 1;
        }
    }
    counts
}

/// Replaces the timestamps of dimensions `dims` by window counts of width `width`.
///
/// The censored dimensions must form the leading block `0..dims.len()`.
pub fn censor(history: &EventHistory, dims: &[usize], width: f64) -> Result<Dataset> {
    if !(width.is_finite() && width > 0.0) {
        return Err(PmbpError::Domain(format!("censor width {width} must be positive")));
    }
    let mut sorted = dims.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let e = sorted.len();
    if sorted.iter().enumerate().any(|(k, &j)| k != j) || e > history.dim() {
        return Err(PmbpError::Domain("censored dimensions must be the leading block 0..e".into()));
    }
    let boundaries = window_boundaries(history.horizon, width);
    let counts = (0..e)
        .map(|j| CensoredSeries { boundaries: boundaries.clone(), counts: bin_counts(&history.events[j], &boundaries) })
        .collect();
    let events = history.events.iter().enumerate().map(|(j, ev)| if j < e { Vec::new() } else { ev.clone() }).collect();
    Ok(Dataset { horizon: history.horizon, e, counts, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn censor_examples() {
        let h = EventHistory::new(2.0, vec![vec![0.5, 1.5]]).unwrap();
        let ds = censor(&h, &[0], 1.0).unwrap();
        assert_eq!(ds.counts[0].counts, vec![1, 1]);
        assert_eq!(ds.counts[0].boundaries, vec![0.0, 1.0, 2.0]);

        let ds = censor(&h, &[0], 5.0).unwrap();
        assert_eq!(ds.counts[0].counts, vec![2]);
        assert_eq!(ds.counts[0].boundaries, vec![0.0, 2.0]);
    }

    #[test]
    fn boundary_event_belongs_to_next_window() {
        let h = EventHistory::new(3.0, vec![vec![1.0, 2.0]]).unwrap();
        let ds = censor(&h, &[0], 1.0).unwrap();
        assert_eq!(ds.counts[0].counts, vec![0, 1, 1]);
    }

    #[test]
    fn last_window_is_clipped() {
        assert_eq!(window_boundaries(2.5, 1.0), vec![0.0, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn censor_rejects_non_leading_block() {
        let h = EventHistory::new(2.0, vec![vec![0.5], vec![1.5]]).unwrap();
        assert!(censor(&h, &[1], 1.0).is_err());
        assert!(censor(&h, &[0], 0.0).is_err());
    }

    #[test]
    fn history_validation() {
        assert!(EventHistory::new(1.0, vec![vec![0.5, 0.5]]).is_err());
        assert!(EventHistory::new(1.0, vec![vec![1.0]]).is_err());
        assert!(EventHistory::new(1.0, vec![vec![0.0, 0.9]]).is_ok());
    }

    proptest! {
        #[test]
        fn censoring_conserves_counts(mut ts in prop::collection::vec(0.0f64..10.0, 0..200), w in 0.1f64..12.0) {
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            let h = EventHistory::new(10.0, vec![ts.clone(), ts.clone()]).unwrap();
            let ds = censor(&h, &[0], w).unwrap();
            prop_assert_eq!(ds.counts[0].total() as usize, ts.len());
            prop_assert_eq!(&ds.events[1], &ts);
            prop_assert!(ds.validate(2, 1).is_ok());
        }
    }
}
