//! Chain and estimator diagnostics: mean squared jump distance, effective
//! sample size, autocorrelation, running medians, and mean-square-distance
//! curves across replicated estimation runs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::saem::SaemTrace;
use crate::samplers::ChainTrace;

/// Minimum chain length for the autocorrelation-based effective sample size.
pub const MIN_ESS_LEN: usize = 100;

// ---------------------------------------------------------------------------
// Scalar-series primitives
// ---------------------------------------------------------------------------

/// Mean squared jump distance of one coordinate series.
pub fn msjd_series(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Invalid(format!(
            "mean squared jump distance needs at least 2 samples, got {}",
            series.len()
        )));
    }
    let n = series.len();
    let sum: f64 = series.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(sum / (n - 1) as f64)
}

fn autocovariance(series: &[f64], mean: f64, lag: usize) -> f64 {
    let n = series.len();
    let mut acc = 0.0;
    for k in 0..n - lag {
        acc += (series[k] - mean) * (series[k + lag] - mean);
    }
    acc / n as f64
}

/// Empirical autocorrelations at lags `0..=max_lag` (lag 0 is 1 by
/// definition). A zero-variance series reports 1 at lag 0 and 0 elsewhere.
pub fn acf_series(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Invalid("autocorrelation of an empty series".into()));
    }
    let n = series.len();
    let max_lag = max_lag.min(n - 1);
    let mean = series.iter().sum::<f64>() / n as f64;
    let g0 = autocovariance(series, mean, 0);
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for lag in 1..=max_lag {
        if g0 <= 0.0 {
            out.push(0.0);
        } else {
            out.push(autocovariance(series, mean, lag) / g0);
        }
    }
    Ok(out)
}

/// Effective sample size of one coordinate series with the
/// initial-positive-sequence truncation: pairwise sums of consecutive
/// autocorrelations are accumulated while they stay positive.
///
/// Returns `(ess, degenerate)`; a zero-variance series reports `n` flagged.
pub fn ess_series(series: &[f64]) -> Result<(f64, bool)> {
    let n = series.len();
    if n < MIN_ESS_LEN {
        return Err(Error::Invalid(format!(
            "effective sample size needs at least {MIN_ESS_LEN} samples, got {n}"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let g0 = autocovariance(series, mean, 0);
    if g0 <= 0.0 || !g0.is_finite() {
        return Ok((n as f64, true));
    }
    // tau = 1 + 2 sum rho_l, accumulated as 2 * sum of positive pair sums - 1.
    let mut pair_total = 0.0;
    let mut m = 0;
    loop {
        let l0 = 2 * m;
        let l1 = 2 * m + 1;
        if l1 >= n {
            break;
        }
        let pair = autocovariance(series, mean, l0) / g0
            + autocovariance(series, mean, l1) / g0;
        if pair <= 0.0 {
            break;
        }
        pair_total += pair;
        m += 1;
    }
    let tau = (2.0 * pair_total - 1.0).max(1.0);
    Ok(((n as f64 / tau).min(n as f64), false))
}

/// Exact running medians: entry `k` is the median of `series[..=k]`.
///
/// Two insert-only heaps carry the lower half (max-heap) and upper half
/// (min-heap); the median is a top or the average of both tops.
pub fn running_median(series: &[f64]) -> Vec<f64> {
    #[derive(PartialEq)]
    struct Ord64(f64);
    impl Eq for Ord64 {}
    impl PartialOrd for Ord64 {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Ord64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }

    let mut lo: BinaryHeap<Ord64> = BinaryHeap::new();
    let mut hi: BinaryHeap<Reverse<Ord64>> = BinaryHeap::new();
    let mut out = Vec::with_capacity(series.len());
    for &x in series {
        if lo.peek().map_or(true, |top| x <= top.0) {
            lo.push(Ord64(x));
        } else {
            hi.push(Reverse(Ord64(x)));
        }
        // Rebalance so lo holds the same count as hi or one more.
        if lo.len() > hi.len() + 1 {
            hi.push(Reverse(lo.pop().unwrap()));
        } else if hi.len() > lo.len() {
            lo.push(hi.pop().unwrap().0);
        }
        let median = if lo.len() > hi.len() {
            lo.peek().unwrap().0
        } else {
            0.5 * (lo.peek().unwrap().0 + hi.peek().unwrap().0 .0)
        };
        out.push(median);
    }
    out
}

// ---------------------------------------------------------------------------
// Chain-level diagnostics
// ---------------------------------------------------------------------------

/// Mean squared jump distance per coordinate of a sampling trace.
pub fn msjd(trace: &ChainTrace) -> Result<Vec<f64>> {
    (0..trace.dim())
        .map(|j| msjd_series(&trace.coordinate(j)))
        .collect()
}

/// Effective sample size per coordinate, with degenerate-coordinate flags.
pub fn ess(trace: &ChainTrace) -> Result<(Vec<f64>, Vec<bool>)> {
    let per: Vec<(f64, bool)> = (0..trace.dim())
        .map(|j| ess_series(&trace.coordinate(j)))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().unzip())
}

/// Autocorrelations per coordinate at lags `0..=max_lag`.
pub fn acf(trace: &ChainTrace, max_lag: usize) -> Result<Vec<Vec<f64>>> {
    (0..trace.dim())
        .map(|j| acf_series(&trace.coordinate(j), max_lag))
        .collect()
}

/// Per-coordinate diagnostics of one sampling trace.
#[derive(Clone, Debug)]
pub struct ChainSummary {
    pub msjd: Vec<f64>,
    pub ess: Vec<f64>,
    pub ess_degenerate: Vec<bool>,
    /// Autocorrelations, one vector of lags 0..=L per coordinate.
    pub acf: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub running_median: Vec<Vec<f64>>,
}

impl ChainSummary {
    pub fn from_trace(trace: &ChainTrace, max_lag: usize) -> Result<Self> {
        let coords: Vec<Vec<f64>> = (0..trace.dim()).map(|j| trace.coordinate(j)).collect();
        let per: Vec<(f64, (f64, bool), Vec<f64>, Vec<f64>)> = coords
            .par_iter()
            .map(|series| {
                Ok((
                    msjd_series(series)?,
                    ess_series(series)?,
                    acf_series(series, max_lag)?,
                    running_median(series),
                ))
            })
            .collect::<Result<_>>()?;
        let mut summary = ChainSummary {
            msjd: Vec::new(),
            ess: Vec::new(),
            ess_degenerate: Vec::new(),
            acf: Vec::new(),
            acceptance_rate: trace.acceptance_rate(),
            running_median: Vec::new(),
        };
        for (m, (e, flag), a, med) in per {
            summary.msjd.push(m);
            summary.ess.push(e);
            summary.ess_degenerate.push(flag);
            summary.acf.push(a);
            summary.running_median.push(med);
        }
        Ok(summary)
    }
}

// ---------------------------------------------------------------------------
// Replicated-run curves
// ---------------------------------------------------------------------------

/// Mean square distance to the final value across replicated runs:
/// `E_k = (1/M) sum_m (x_m[k] - x_m[K-1])^2`. The last entry is 0 by
/// construction.
pub fn mean_square_distance_series(runs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if runs.is_empty() {
        return Err(Error::Invalid("no replicates provided".into()));
    }
    let k_len = runs[0].len();
    if k_len == 0 {
        return Err(Error::Invalid("replicates are empty".into()));
    }
    if runs.iter().any(|r| r.len() != k_len) {
        return Err(Error::Invalid(
            "replicates must all have the same number of iterations".into(),
        ));
    }
    let m = runs.len() as f64;
    Ok((0..k_len)
        .map(|k| {
            runs.iter()
                .map(|r| (r[k] - r[k_len - 1]).powi(2))
                .sum::<f64>()
                / m
        })
        .collect())
}

/// Mean square distance of one named parameter component across replicated
/// estimation runs.
pub fn mean_square_distance(traces: &[SaemTrace], component: &str) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Err(Error::Invalid("no replicates provided".into()));
    }
    let runs: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            t.component(component).ok_or_else(|| {
                Error::Invalid(format!("unknown parameter component {component}"))
            })
        })
        .collect::<Result<_>>()?;
    mean_square_distance_series(&runs)
}
