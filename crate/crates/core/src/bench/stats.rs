//! Latency percentiles, SLO accounting and throughput.

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::clock::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub p5_us: Micros,
    pub p50_us: Micros,
    pub p95_us: Micros,
    pub mean_us: f64,
    pub count: usize,
}

/// Nearest-rank percentile of an ascending slice: the value at rank `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[Micros], p: f64) -> Micros {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn latency_stats(latencies: &[Micros]) -> Result<LatencyStats, BenchError> {
    if latencies.is_empty() {
        return Err(BenchError::NoData);
    }
    let mut v = latencies.to_vec();
    v.sort_unstable();
    let sum: u128 = v.iter().map(|x| u128::from(*x)).sum();
    Ok(LatencyStats {
        p5_us: nearest_rank(&v, 5.0),
        p50_us: nearest_rank(&v, 50.0),
        p95_us: nearest_rank(&v, 95.0),
        mean_us: sum as f64 / v.len() as f64,
        count: v.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloTarget {
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_miss_rate: Option<f64>,
}

impl SloTarget {
    pub fn new(latency_ms: f64) -> Self {
        Self {
            latency_ms,
            allowed_miss_rate: None,
        }
    }

    pub fn latency_us(&self) -> Micros {
        crate::clock::ms_to_us(self.latency_ms)
    }

    /// Column suffix, e.g. `200` or `12.5`.
    pub fn label(&self) -> String {
        let s = format!("{}", self.latency_ms);
        s.trim_end_matches(".0").to_string()
    }

    pub fn defaults() -> Vec<SloTarget> {
        vec![SloTarget::new(200.0), SloTarget::new(500.0)]
    }
}

/// Misses and total for one target. A query without a latency (failed) is a miss.
pub fn miss_count(latencies: &[Option<Micros>], target: &SloTarget) -> (usize, usize) {
    let t = target.latency_us();
    let misses = latencies.iter().filter(|l| l.is_none_or(|l| l > t)).count();
    (misses, latencies.len())
}

pub fn slo_miss_rate(latencies: &[Option<Micros>], target: &SloTarget) -> Result<f64, BenchError> {
    if latencies.is_empty() {
        return Err(BenchError::NoData);
    }
    let (m, n) = miss_count(latencies, target);
    Ok(m as f64 / n as f64)
}

/// Middle 80% of `[from, to)`.
pub fn steady_window(from: Micros, to: Micros) -> (Micros, Micros) {
    let trim = (to.saturating_sub(from)) / 10;
    (from + trim, to - trim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub qps: f64,
    pub completions: usize,
    pub window: (Micros, Micros),
    pub backlog: bool,
}

/// Number of equal buckets the in-flight samples are split into for the backlog check.
pub const BACKLOG_BUCKETS: usize = 10;

/// Completions per second inside `window`. Backlog is flagged when the
/// per-bucket maximum of in-flight samples never decreases across the window
/// and ends higher than it starts.
pub fn sustained_throughput(
    egress: &[Micros],
    in_flight: &[(Micros, usize)],
    window: (Micros, Micros),
    run: (Micros, Micros),
) -> Result<Throughput, BenchError> {
    let (from, to) = window;
    if from >= to || from < run.0 || to > run.1 {
        return Err(BenchError::BadRange(from, to));
    }
    let completions = egress.iter().filter(|t| (from..to).contains(*t)).count();
    let span = (to - from) as f64 / 1e6;
    let width = ((to - from) / BACKLOG_BUCKETS as Micros).max(1);
    let mut maxima = vec![None; BACKLOG_BUCKETS];
    for &(t, n) in in_flight.iter().filter(|(t, _)| (from..to).contains(t)) {
        let b = (((t - from) / width) as usize).min(BACKLOG_BUCKETS - 1);
        maxima[b] = Some(maxima[b].map_or(n, |m: usize| m.max(n)));
    }
    let m: Vec<usize> = maxima.into_iter().flatten().collect();
    let backlog = m.len() >= 2 && m.windows(2).all(|w| w[0] <= w[1]) && m.last() > m.first();
    Ok(Throughput {
        qps: completions as f64 / span,
        completions,
        window,
        backlog,
    })
}
