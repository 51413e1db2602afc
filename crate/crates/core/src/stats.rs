//! Replica bookkeeping: block jackknife errors and the replica runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replicas per jackknife block.
pub const BLOCK: usize = 64;

/// Environment variable holding the worker count for replica loops.
pub const WORKERS_VAR: &str = "POLYMER2D_WORKERS";

/// Block boundaries for `n` items: blocks of [`BLOCK`] when there are at
/// least two of them, single items otherwise. The remainder is spread so
/// block sizes differ by at most one.
pub(crate) fn block_bounds(n: usize) -> Vec<usize> {
    let nb = if n >= 2 * BLOCK { n / BLOCK } else { n };
    (0..=nb).map(|b| b * n / nb.max(1)).collect()
}

/// Estimate and delete-one-block jackknife standard error of `stat`.
pub fn jackknife<T: Clone>(items: &[T], stat: impl Fn(&[T]) -> f64) -> (f64, f64) {
    let full = stat(items);
    let bounds = block_bounds(items.len());
    let nb = bounds.len() - 1;
    if nb < 2 {
        return (full, f64::NAN);
    }
    let mut scratch: Vec<T> = Vec::with_capacity(items.len());
    let loo: Vec<f64> = bounds
        .windows(2)
        .map(|w| {
            scratch.clear();
            scratch.extend_from_slice(&items[..w[0]]);
            scratch.extend_from_slice(&items[w[1]..]);
            stat(&scratch)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / nb as f64;
    let ss: f64 = loo.iter().map(|t| (t - mean) * (t - mean)).sum();
    (full, ((nb - 1) as f64 / nb as f64 * ss).sqrt())
}

/// Sample mean with its block jackknife error; linear, so no resampling needed.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let bounds = block_bounds(n);
    let nb = bounds.len() - 1;
    if nb < 2 {
        return (mean, f64::NAN);
    }
    // Leave-one-block-out means, then the usual jackknife spread.
    let total: f64 = x.iter().sum();
    let loo: Vec<f64> = bounds
        .windows(2)
        .map(|w| (total - x[w[0]..w[1]].iter().sum::<f64>()) / (n - (w[1] - w[0])) as f64)
        .collect();
    let m = loo.iter().sum::<f64>() / nb as f64;
    let ss: f64 = loo.iter().map(|t| (t - m) * (t - m)).sum();
    (mean, ((nb - 1) as f64 / nb as f64 * ss).sqrt())
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
}

/// Least-squares slope; `None` below two distinct abscissae.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Estimate with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn mean_of(x: &[f64]) -> Self {
        let (value, se) = mean_se(x);
        Self { value, se }
    }

    pub fn variance_of(x: &[f64]) -> Self {
        let (value, se) = jackknife(x, variance);
        Self { value, se }
    }

    /// Fraction of items satisfying `pred`.
    pub fn fraction<T>(x: &[T], pred: impl Fn(&T) -> bool) -> Self {
        let ind: Vec<f64> = x.iter().map(|v| if pred(v) { 1.0 } else { 0.0 }).collect();
        Self::mean_of(&ind)
    }
}

/// A named pass/fail check with its slack (positive when it passes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
}

impl Check {
    /// Passes when `lhs ≤ rhs`.
    pub fn at_most(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            pass: lhs <= rhs,
            margin: rhs - lhs,
        }
    }

    /// Passes when `|a − b| ≤ k·se`.
    pub fn agree(name: impl Into<String>, a: f64, b: f64, se: f64, k: f64) -> Self {
        Self::at_most(name, (a - b).abs(), k * se)
    }
}

/// Worker count from [`WORKERS_VAR`], if set to a positive integer.
pub fn configured_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_VAR) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Parse(format!(
                "{WORKERS_VAR} must be a positive integer, got {s:?}"
            ))),
            Ok(k) => Ok(Some(k)),
        },
    }
}

/// `f(0), …, f(reps−1)` evaluated in parallel and returned in replica order,
/// so reductions over the result do not depend on the worker count.
pub fn run_replicas<T: Send>(
    reps: u64,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    run_replicas_on(configured_workers()?, reps, f)
}

/// [`run_replicas`] on a pool of `workers` threads (the global pool if `None`).
pub fn run_replicas_on<T: Send>(
    workers: Option<usize>,
    reps: u64,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let work = || {
        (0..reps)
            .into_par_iter()
            .map(&f)
            .collect::<Result<Vec<T>>>()
    };
    match workers {
        None => work(),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?
            .install(work),
    }
}

/// Means of the jackknife blocks of `x`.
pub fn block_means(x: &[f64]) -> Vec<f64> {
    block_bounds(x.len())
        .windows(2)
        .map(|w| x[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}
