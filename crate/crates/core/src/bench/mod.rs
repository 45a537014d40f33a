//! Open-loop load generation and run reports.
//!
//! A [`WorkloadSpec`] expands into a fixed arrival schedule that depends only
//! on the workload and its seed. [`drive`] submits those arrivals to a runtime at
//! their scheduled times, optionally ticking an elasticity controller and a
//! scripted resize, and [`RunReport::build`] turns the finished run into
//! per-query rows, percentiles, SLO miss rates, throughput and GRACT.

mod output;
pub mod scenarios;
mod stats;

use std::collections::BTreeMap;
use std::path::PathBuf;

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use output::{
    emit_report, svg_heatmap, svg_lines, write_arrivals_csv, write_curve_csv, write_gract_matrix_csv, write_queries_csv, CurvePoint,
};
pub use stats::{
    latency_stats, miss_count, nearest_rank, slo_miss_rate, steady_window, sustained_throughput, LatencyStats, SloTarget, Throughput,
    BACKLOG_BUCKETS,
};

use crate::clock::{ms_to_us, Micros};
use crate::elasticity::{Controller, Thresholds};
use crate::executor::{InstanceId, InstanceState};
use crate::runtime::{QueryId, QueryStatus, Runtime, RuntimeError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no completed queries")]
    NoData,
    #[error("window [{0}, {1}) is outside the run")]
    BadRange(Micros, Micros),
    #[error("no such pipeline {0}")]
    NoSuchPipeline(String),
    #[error("bad workload: {0}")]
    BadWorkload(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error(transparent)]
    Plan(#[from] crate::planner::PlanError),
    #[error(transparent)]
    Exec(#[from] crate::executor::ExecError),
}

impl From<RuntimeError> for BenchError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::NoSuchPipeline(p) => BenchError::NoSuchPipeline(p),
            e => BenchError::Runtime(e),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalKind {
    #[default]
    Constant,
    Poisson,
}

/// A stretch of constant offered rate, bounded by a query count or a duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<f64>,
    pub rate_qps: f64,
    #[serde(default)]
    pub arrival: ArrivalKind,
}

impl Phase {
    pub fn queries(n: u64, rate_qps: f64, arrival: ArrivalKind) -> Self {
        Self {
            queries: Some(n),
            duration_ms: None,
            rate_qps,
            arrival,
        }
    }

    pub fn duration(ms: f64, rate_qps: f64, arrival: ArrivalKind) -> Self {
        Self {
            queries: None,
            duration_ms: Some(ms),
            rate_qps,
            arrival,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_payload() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub pipeline: String,
    pub phases: Vec<Phase>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
}

/// One scheduled submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Arrival {
    pub index: u64,
    pub phase: usize,
    pub t_us: Micros,
}

impl WorkloadSpec {
    pub fn new(pipeline: &str, phases: Vec<Phase>, seed: u64) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            phases,
            seed,
            payload_bytes: default_payload(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::BadWorkload(m));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.rate_qps.is_finite() && p.rate_qps > 0.0) {
                return bad(format!("phase {i}: rate must be positive"));
            }
            match (p.queries, p.duration_ms) {
                (Some(n), None) if n > 0 => {}
                (None, Some(d)) if d.is_finite() && d > 0.0 => {}
                _ => return bad(format!("phase {i}: give exactly one of a positive query count or duration")),
            }
        }
        Ok(())
    }

    /// The arrival schedule. Each phase starts where the previous one ended.
    pub fn arrivals(&self) -> Result<Vec<Arrival>, BenchError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        let mut t = 0.0f64;
        for (pi, p) in self.phases.iter().enumerate() {
            let gap = 1e6 / p.rate_qps;
            let exp = Exp::new(p.rate_qps / 1e6).expect("positive rate");
            let start = t;
            let end = p.duration_ms.map(|d| start + d * 1000.0);
            let mut k = 0u64;
            loop {
                if p.queries.is_some_and(|n| k >= n) || end.is_some_and(|e| t >= e) {
                    break;
                }
                out.push(Arrival {
                    index: out.len() as u64,
                    phase: pi,
                    t_us: t.round() as Micros,
                });
                k += 1;
                t = match p.arrival {
                    ArrivalKind::Constant => start + k as f64 * gap,
                    ArrivalKind::Poisson => t + exp.sample(&mut rng),
                };
            }
        }
        Ok(out)
    }

    pub fn payload(&self, index: u64) -> Bytes {
        let mut s = format!("q{index}").into_bytes();
        s.resize(self.payload_bytes.max(s.len()), b'.');
        Bytes::from(s)
    }
}

/// A resize scripted at a fixed query index. With `preload`, the models are
/// loaded on the standby instances as soon as a surge is detected and the
/// instances join at `at_query`; without it they join cold at `at_query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub model: String,
    pub instances: Vec<InstanceId>,
    pub at_query: u64,
    #[serde(default)]
    pub preload: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ResizeEvent {
    SurgeDetected { ts: Micros, utilization: f64 },
    Preloaded { ts: Micros, instance: InstanceId },
    Activated { ts: Micros, instance: InstanceId },
    ColdJoined { ts: Micros, instance: InstanceId },
}

#[derive(Debug)]
pub struct RunOptions {
    pub controller: Option<Controller>,
    pub resize: Option<ResizePlan>,
    /// Surge detector settings for a preloading resize.
    pub detect: Thresholds,
    pub tick_ms: f64,
    pub sample_ms: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            controller: None,
            resize: None,
            detect: Thresholds::default(),
            tick_ms: 100.0,
            sample_ms: 50.0,
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub pipeline: String,
    pub phases: Vec<Phase>,
    pub arrivals: Vec<Arrival>,
    pub query_ids: Vec<QueryId>,
    pub in_flight: Vec<(Micros, usize)>,
    pub resize_events: Vec<ResizeEvent>,
    pub controller: Option<Controller>,
}

struct Driver {
    opts: RunOptions,
    detector: Option<Controller>,
    preloaded: bool,
    resized: bool,
    awaiting: Vec<InstanceId>,
    next_tick: Micros,
    next_sample: Micros,
    tick_us: Micros,
    sample_us: Micros,
    in_flight: Vec<(Micros, usize)>,
    resize_events: Vec<ResizeEvent>,
}

impl Driver {
    fn hooks_until(&mut self, rt: &mut Runtime, t: Micros) -> Result<(), BenchError> {
        loop {
            let h = self.next_tick.min(self.next_sample);
            if h > t {
                break;
            }
            rt.advance_to(h);
            if h == self.next_sample {
                self.in_flight.push((h, rt.stats().in_flight as usize));
                self.next_sample += self.sample_us;
            }
            if h == self.next_tick {
                self.tick(rt)?;
                self.next_tick += self.tick_us;
            }
        }
        rt.advance_to(t);
        Ok(())
    }

    fn tick(&mut self, rt: &mut Runtime) -> Result<(), BenchError> {
        let now = rt.now();
        let arrivals: BTreeMap<String, u64> = rt.model_ids().into_iter().map(|m| (m.clone(), rt.take_arrivals(&m))).collect();
        if let Some(c) = self.opts.controller.as_mut() {
            c.tick_with(rt, &arrivals)?;
        }
        if let (Some(plan), Some(det)) = (self.opts.resize.as_ref(), self.detector.as_mut()) {
            let n = arrivals.get(&plan.model).copied().unwrap_or(0);
            let est = det.observe(&plan.model, n, now, rt.capacity_qps(&plan.model));
            if !self.preloaded && !self.resized && est.utilization > det.thresholds.preload {
                self.preloaded = true;
                self.resize_events.push(ResizeEvent::SurgeDetected {
                    ts: now,
                    utilization: est.utilization,
                });
                for &i in &plan.instances {
                    rt.preload(i, &plan.model)?;
                    self.resize_events.push(ResizeEvent::Preloaded { ts: now, instance: i });
                }
            }
        }
        self.activate_ready(rt)
    }

    fn activate_ready(&mut self, rt: &mut Runtime) -> Result<(), BenchError> {
        let now = rt.now();
        let mut still = Vec::new();
        for i in std::mem::take(&mut self.awaiting) {
            if rt.cluster().instance(i)?.state() == InstanceState::Ready {
                rt.activate(i)?;
                self.resize_events.push(ResizeEvent::Activated { ts: now, instance: i });
            } else {
                still.push(i);
            }
        }
        self.awaiting = still;
        Ok(())
    }

    fn resize(&mut self, rt: &mut Runtime) -> Result<(), BenchError> {
        let Some(plan) = self.opts.resize.clone() else { return Ok(()) };
        self.resized = true;
        let now = rt.now();
        for i in plan.instances {
            rt.advance_to(now);
            match rt.cluster().instance(i)?.state() {
                InstanceState::Empty => {
                    rt.cold_join(i, &plan.model)?;
                    self.resize_events.push(ResizeEvent::ColdJoined { ts: now, instance: i });
                }
                _ => self.awaiting.push(i),
            }
        }
        self.activate_ready(rt)
    }
}

/// Submits `spec` to `rt` open-loop and runs until every query has finished.
pub fn drive(rt: &mut Runtime, spec: &WorkloadSpec, opts: RunOptions) -> Result<RunOutput, BenchError> {
    let arrivals = spec.arrivals()?;
    if rt.pipeline(&spec.pipeline).is_none() {
        return Err(BenchError::NoSuchPipeline(spec.pipeline.clone()));
    }
    let start = rt.now();
    let shift = |t: Micros| start + t;
    let tick_us = ms_to_us(opts.tick_ms).max(1);
    let sample_us = ms_to_us(opts.sample_ms).max(1);
    let detector = opts
        .resize
        .as_ref()
        .filter(|p| p.preload)
        .map(|_| Controller::new(opts.detect.clone()));
    let mut d = Driver {
        opts,
        detector,
        preloaded: false,
        resized: false,
        awaiting: Vec::new(),
        next_tick: start + tick_us,
        next_sample: start,
        tick_us,
        sample_us,
        in_flight: Vec::new(),
        resize_events: Vec::new(),
    };
    let mut query_ids = Vec::with_capacity(arrivals.len());
    for a in &arrivals {
        d.hooks_until(rt, shift(a.t_us))?;
        if d.opts.resize.as_ref().is_some_and(|p| p.at_query == a.index) {
            d.resize(rt)?;
        }
        query_ids.push(rt.ingress_submit(&spec.pipeline, spec.payload(a.index))?);
    }
    while let Some(t) = rt.next_event_time() {
        d.hooks_until(rt, t)?;
    }
    d.in_flight.push((rt.now(), rt.stats().in_flight as usize));
    Ok(RunOutput {
        pipeline: spec.pipeline.clone(),
        phases: spec.phases.clone(),
        arrivals: arrivals.iter().map(|a| Arrival { t_us: shift(a.t_us), ..*a }).collect(),
        query_ids,
        in_flight: d.in_flight,
        resize_events: d.resize_events,
        controller: d.opts.controller,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRow {
    pub query_id: QueryId,
    pub phase: usize,
    pub arrival_us: Micros,
    pub ingress_us: Micros,
    pub egress_us: Option<Micros>,
    pub latency_us: Option<Micros>,
    /// `stage:instance` pairs in stage order, `;`-separated.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissRate {
    pub target: SloTarget,
    pub misses: usize,
    pub total: usize,
    pub rate: f64,
}

impl MissRate {
    pub fn exceeded(&self) -> bool {
        self.target.allowed_miss_rate.is_some_and(|a| self.rate > a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub rate_qps: f64,
    pub queries: usize,
    pub throughput: Option<Throughput>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeGract {
    pub node: u32,
    pub gract: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub pipeline: String,
    pub submitted: usize,
    pub completed: usize,
    pub failed: usize,
    pub stats: Option<LatencyStats>,
    pub miss: Vec<MissRate>,
    pub phases: Vec<PhaseSummary>,
    /// Window the GRACT summary covers: the steady part of the last phase.
    pub gract_window: (Micros, Micros),
    pub gract: Vec<NodeGract>,
    pub span: (Micros, Micros),
    #[serde(skip)]
    pub rows: Vec<QueryRow>,
}

impl RunReport {
    pub fn build(rt: &Runtime, out: &RunOutput, targets: &[SloTarget]) -> Result<Self, BenchError> {
        let mut rows = Vec::with_capacity(out.arrivals.len());
        for (a, &id) in out.arrivals.iter().zip(&out.query_ids) {
            let rec = rt.query(id).expect("submitted query has a record");
            let path: Vec<String> = rec.stages.iter().map(|(s, t)| format!("{s}:{}", t.instance)).collect();
            let done = rec.status == QueryStatus::Completed;
            rows.push(QueryRow {
                query_id: id,
                phase: a.phase,
                arrival_us: a.t_us,
                ingress_us: rec.ingress_us,
                egress_us: rec.egress_us.filter(|_| done),
                latency_us: rec.latency_us().filter(|_| done),
                path: path.join(";"),
            });
        }
        Self::from_rows(rows, out, rt, targets)
    }

    fn from_rows(rows: Vec<QueryRow>, out: &RunOutput, rt: &Runtime, targets: &[SloTarget]) -> Result<Self, BenchError> {
        let lat: Vec<Option<Micros>> = rows.iter().map(|r| r.latency_us).collect();
        let done: Vec<Micros> = lat.iter().flatten().copied().collect();
        let stats = latency_stats(&done).ok();
        let miss = if rows.is_empty() {
            Vec::new()
        } else {
            targets
                .iter()
                .map(|t| {
                    let (misses, total) = miss_count(&lat, t);
                    MissRate {
                        target: *t,
                        misses,
                        total,
                        rate: misses as f64 / total as f64,
                    }
                })
                .collect()
        };
        let first = rows.first().map_or(0, |r| r.arrival_us);
        let last = rows.iter().filter_map(|r| r.egress_us).max().unwrap_or(first).max(rows.last().map_or(0, |r| r.arrival_us));
        let span = (first, last.max(first + 1));
        let egress: Vec<Micros> = rows.iter().filter_map(|r| r.egress_us).collect();
        let mut phases = Vec::new();
        let mut gract_window = span;
        for (pi, p) in out.phases.iter().enumerate() {
            let ts: Vec<Micros> = rows.iter().filter(|r| r.phase == pi).map(|r| r.arrival_us).collect();
            let throughput = match (ts.first(), ts.last()) {
                (Some(&a), Some(&b)) if b > a => {
                    let w = steady_window(a, b);
                    gract_window = w;
                    sustained_throughput(&egress, &out.in_flight, w, span).ok()
                }
                _ => None,
            };
            phases.push(PhaseSummary {
                phase: pi,
                rate_qps: p.rate_qps,
                queries: ts.len(),
                throughput,
            });
        }
        let mut gract = Vec::new();
        for node in rt.cluster().nodes().iter().filter(|n| !n.host && n.layout.is_some()) {
            if let Ok(g) = rt.cluster().node_gract(node.id, gract_window.0, gract_window.1) {
                gract.push(NodeGract { node: node.id, gract: g });
            }
        }
        Ok(Self {
            pipeline: out.pipeline.clone(),
            submitted: rows.len(),
            completed: done.len(),
            failed: rows.len() - done.len(),
            stats,
            miss,
            phases,
            gract_window,
            gract,
            span,
            rows,
        })
    }

    pub fn targets(&self) -> Vec<SloTarget> {
        self.miss.iter().map(|m| m.target).collect()
    }

    /// Offered rate of the last phase.
    pub fn offered_qps(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.rate_qps)
    }

    /// Sustained throughput of the last phase.
    pub fn achieved_qps(&self) -> f64 {
        self.phases.last().and_then(|p| p.throughput).map_or(0.0, |t| t.qps)
    }

    pub fn budget_exceeded(&self) -> bool {
        self.miss.iter().any(MissRate::exceeded)
    }

    pub fn curve_point(&self) -> Option<CurvePoint> {
        let s = self.stats?;
        Some(CurvePoint {
            offered_qps: self.offered_qps(),
            p5_ms: s.p5_us as f64 / 1000.0,
            p50_ms: s.p50_us as f64 / 1000.0,
            p95_ms: s.p95_us as f64 / 1000.0,
            miss_rates: self.miss.iter().map(|m| m.rate).collect(),
            achieved_qps: self.achieved_qps(),
        })
    }

    /// Latency statistics over rows whose arrival index lies in `range`.
    pub fn stats_for(&self, range: std::ops::Range<usize>) -> Result<LatencyStats, BenchError> {
        let lat: Vec<Micros> = self.rows.get(range).unwrap_or_default().iter().filter_map(|r| r.latency_us).collect();
        latency_stats(&lat)
    }

    pub fn mean_gract(&self, nodes: &[u32]) -> Option<f64> {
        let v: Vec<f64> = self.gract.iter().filter(|g| nodes.contains(&g.node)).map(|g| g.gract).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rate_for_a_duration() {
        let w = WorkloadSpec::new("p", vec![Phase::duration(10_000.0, 100.0, ArrivalKind::Constant)], 1);
        let a = w.arrivals().unwrap();
        assert!((999..=1001).contains(&a.len()), "{}", a.len());
        assert!(a.windows(2).all(|p| p[1].t_us - p[0].t_us == 10_000));
    }

    #[test]
    fn poisson_is_seeded() {
        let w = WorkloadSpec::new("p", vec![Phase::queries(500, 100.0, ArrivalKind::Poisson)], 42);
        assert_eq!(w.arrivals().unwrap(), w.arrivals().unwrap());
        let other = WorkloadSpec { seed: 43, ..w.clone() };
        assert_ne!(w.arrivals().unwrap(), other.arrivals().unwrap());
        let a = w.arrivals().unwrap();
        let mean_gap = a.last().unwrap().t_us as f64 / (a.len() - 1) as f64;
        assert!((mean_gap - 10_000.0).abs() < 1_500.0, "{mean_gap}");
    }

    #[test]
    fn rate_changes_at_the_phase_boundary() {
        let w = WorkloadSpec::new(
            "p",
            vec![Phase::queries(2000, 70.0, ArrivalKind::Constant), Phase::queries(4000, 130.0, ArrivalKind::Constant)],
            1,
        );
        let a = w.arrivals().unwrap();
        assert_eq!(a.len(), 6000);
        assert_eq!(a.iter().position(|x| x.phase == 1), Some(2000));
        let gap = |i: usize| a[i + 1].t_us - a[i].t_us;
        assert!((gap(1998) as f64 - 1e6 / 70.0).abs() <= 1.0);
        assert!((gap(2000) as f64 - 1e6 / 130.0).abs() <= 1.0);
    }

    #[test]
    fn bad_workloads() {
        let w = |p: Vec<Phase>| WorkloadSpec::new("p", p, 1).validate();
        assert!(w(vec![]).is_err());
        assert!(w(vec![Phase::queries(10, 0.0, ArrivalKind::Constant)]).is_err());
        let both = Phase {
            duration_ms: Some(1.0),
            ..Phase::queries(1, 1.0, ArrivalKind::Constant)
        };
        assert!(w(vec![both]).is_err());
    }

    #[test]
    fn workload_json_round_trip() {
        let text = r#"{"pipeline":"p","phases":[{"queries":10,"rate_qps":5},{"duration_ms":1000,"rate_qps":7,"arrival":"poisson"}]}"#;
        let w: WorkloadSpec = serde_json::from_str(text).unwrap();
        assert_eq!(w.phases[1].arrival, ArrivalKind::Poisson);
        assert_eq!(serde_json::from_str::<WorkloadSpec>(&serde_json::to_string(&w).unwrap()).unwrap(), w);
    }
}
