//! Ready-made experiments over the bundled synthetic profiles.

use serde::Serialize;

use super::{drive, ArrivalKind, BenchError, NodeGract, Phase, ResizeEvent, ResizePlan, RunOptions, RunOutput, RunReport, SloTarget, WorkloadSpec};
use crate::clock::Micros;
use crate::executor::{Cluster, InstanceId, InstanceSize, MigLayout, ProfileSet};
use crate::planner::{monolithic_baseline, plan, Assignment, NodeLayout, Placement, PlacementProblem, ProblemFile};
use crate::runtime::{PipelineSpec, Runtime, RuntimeConfig};

pub const PREFLMR_PROFILES: &str = include_str!("../../data/preflmr_profiles.csv");
pub const PREFLMR_PIPELINE: &str = include_str!("../../data/preflmr_pipeline.json");
pub const PREFLMR_PROBLEM: &str = include_str!("../../data/preflmr_problem.json");

pub fn preflmr_problem() -> PlacementProblem {
    let profiles = ProfileSet::from_csv_str(PREFLMR_PROFILES).expect("bundled profiles parse");
    let file: ProblemFile = serde_json::from_str(PREFLMR_PROBLEM).expect("bundled problem parses");
    PlacementProblem::from_file(file, profiles)
}

pub fn preflmr_pipeline() -> PipelineSpec {
    PipelineSpec::from_json(PREFLMR_PIPELINE).expect("bundled pipeline parses")
}

/// A runtime over `nodes` GPU nodes (plus a host node when any stage model
/// is host-only) with `spec` loaded on `placement`.
pub fn build_runtime(
    profiles: &ProfileSet,
    nodes: u32,
    gpu_gb: u32,
    host_workers: u32,
    spec: &PipelineSpec,
    placement: &Placement,
    config: RuntimeConfig,
) -> Result<Runtime, BenchError> {
    let mut cluster = Cluster::new(nodes, gpu_gb);
    let host_only = |m: &str| profiles.get(m).is_ok_and(|p| p.sizes().iter().all(|s| *s == InstanceSize::Host));
    if spec.stages.iter().any(|s| host_only(&s.model)) {
        cluster.add_host_node(host_workers.max(1));
    }
    let mut rt = Runtime::new(cluster, profiles.clone(), config);
    rt.load_pipeline(spec, placement)?;
    Ok(rt)
}

fn config(seed: u64) -> RuntimeConfig {
    RuntimeConfig {
        seed,
        ..RuntimeConfig::default()
    }
}

/// Runs `spec` on a fresh runtime and builds the report.
pub fn run(rt: &mut Runtime, spec: &WorkloadSpec, opts: RunOptions, targets: &[SloTarget]) -> Result<(RunOutput, RunReport), BenchError> {
    let out = drive(rt, spec, opts)?;
    let report = RunReport::build(rt, &out, targets)?;
    Ok((out, report))
}

#[derive(Debug, Serialize)]
pub struct PackingRun {
    pub placement: Placement,
    pub offered_qps: f64,
    pub report: RunReport,
}

#[derive(Debug, Serialize)]
pub struct PackingReport {
    pub planned: PackingRun,
    pub monolithic: PackingRun,
    /// Planned over monolithic minimum component throughput.
    pub ratio: f64,
    /// Nodes whose single full-GPU slice hosts only the dominant model.
    pub dedicated_nodes: Vec<u32>,
    pub dedicated_gract: f64,
    pub monolithic_gract: Vec<NodeGract>,
}

/// Plans the bundled problem both ways and runs each deployment at
/// `load_fraction` of its own planned capacity.
pub fn packing(load_fraction: f64, queries: u64, seed: u64) -> Result<PackingReport, BenchError> {
    let problem = preflmr_problem();
    let spec = preflmr_pipeline();
    let dominant = "B";
    let run_one = |placement: Placement| -> Result<PackingRun, BenchError> {
        let offered = placement.min_qps() * load_fraction;
        let mut rt = build_runtime(&problem.profiles, problem.nodes, problem.gpu_gb, 2, &spec, &placement, config(seed))?;
        let w = WorkloadSpec::new(&spec.name, vec![Phase::queries(queries, offered, ArrivalKind::Poisson)], seed);
        let (_, report) = run(&mut rt, &w, RunOptions::default(), &SloTarget::defaults())?;
        Ok(PackingRun {
            placement,
            offered_qps: offered,
            report,
        })
    };
    let planned = run_one(plan(&problem)?)?;
    let monolithic = run_one(monolithic_baseline(&problem)?)?;
    let dedicated_nodes: Vec<u32> = planned
        .placement
        .layouts
        .iter()
        .filter(|l| l.layout.as_ref().is_some_and(|l| l.sizes().len() == 1))
        .filter(|l| {
            let on: Vec<&Assignment> = planned.placement.assignments.iter().filter(|a| a.node == l.node).collect();
            !on.is_empty() && on.iter().all(|a| a.model == dominant)
        })
        .map(|l| l.node)
        .collect();
    let dedicated_gract = planned.report.mean_gract(&dedicated_nodes).unwrap_or(0.0);
    Ok(PackingReport {
        ratio: planned.placement.min_qps() / monolithic.placement.min_qps(),
        dedicated_gract,
        monolithic_gract: monolithic.report.gract.clone(),
        dedicated_nodes,
        planned,
        monolithic,
    })
}

/// Sublinear batch profile on a full 24 GB GPU: (batch, latency ms).
pub const SWEEP_PROFILE: [(u32, f64); 6] = [(1, 12.5), (2, 15.0), (4, 20.0), (8, 30.0), (16, 60.0), (32, 120.0)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchPoint {
    pub max_batch: u32,
    pub measured_qps: f64,
    pub analytic_qps: f64,
}

fn single_stage(model: &str, max_batch: u32) -> PipelineSpec {
    let text = format!(
        r#"{{"name":"single","stages":[{{"id":"{model}","model":"{model}","max_batch":{max_batch}}}],"edges":[],"ingress":"{model}","egress":"{model}"}}"#
    );
    PipelineSpec::from_json(&text).expect("static spec")
}

fn one_slice(node: u32, model: &str) -> (NodeLayout, Assignment) {
    (
        NodeLayout {
            node,
            layout: Some(MigLayout::full(24)),
        },
        Assignment {
            node,
            slot: 0,
            size_gb: 24,
            model: model.to_string(),
        },
    )
}

/// Saturates one instance at each batch cap and measures completions per second.
pub fn batch_sweep(caps: &[u32], offered_qps: f64, duration_ms: f64, seed: u64) -> Result<Vec<BatchPoint>, BenchError> {
    let mut profiles = ProfileSet::new();
    profiles.add_curve("S", InstanceSize::Gb(24), 4.0, &SWEEP_PROFILE)?;
    let (layout, assignment) = one_slice(0, "S");
    let placement = Placement {
        layouts: vec![layout],
        assignments: vec![assignment],
        throughput: Vec::new(),
        host_components: Vec::new(),
    };
    let mut out = Vec::new();
    for &cap in caps {
        let spec = single_stage("S", cap);
        let mut rt = build_runtime(&profiles, 1, 24, 0, &spec, &placement, config(seed))?;
        let w = WorkloadSpec::new("single", vec![Phase::duration(duration_ms, offered_qps, ArrivalKind::Poisson)], seed);
        let (_, report) = run(&mut rt, &w, RunOptions::default(), &[])?;
        out.push(BatchPoint {
            max_batch: cap,
            measured_qps: report.achieved_qps(),
            analytic_qps: f64::from(cap) * 1000.0 / profiles.latency_ms("S", InstanceSize::Gb(24), cap)?,
        });
    }
    Ok(out)
}

/// Surge-and-resize experiment: 2000 queries at 70 qps, then 4000 at 130
/// qps; three standby instances join the embedding pool at query 4000.
pub struct ResizeSetup {
    pub profiles: ProfileSet,
    pub spec: PipelineSpec,
    pub placement: Placement,
    pub standby: Vec<InstanceId>,
    pub workload: WorkloadSpec,
    pub gpu_nodes: u32,
}

pub const RESIZE_AT: u64 = 4000;
pub const RESIZE_LOAD_DELAY_MS: f64 = 3000.0;

pub fn resize_setup(seed: u64) -> ResizeSetup {
    let mut profiles = ProfileSet::new();
    profiles
        .add_curve("E", InstanceSize::Gb(24), 8.0, &[(1, 40.0), (2, 50.0), (4, 70.0), (8, 110.0)])
        .expect("static profile");
    profiles
        .add_curve("S", InstanceSize::Host, 1.0, &[(1, 2.0), (2, 3.0), (4, 4.0), (8, 6.0)])
        .expect("static profile");
    let spec = PipelineSpec::from_json(
        r#"{"name":"search","stages":[
            {"id":"embed","model":"E","max_batch":2,"deps":["/search/E/weights"]},
            {"id":"lookup","model":"S","max_batch":8}],
            "edges":[["embed","lookup"]],"ingress":"embed","egress":"lookup"}"#,
    )
    .expect("static spec");
    let mut layouts = Vec::new();
    let mut assignments = Vec::new();
    for node in 0..7 {
        let (l, a) = one_slice(node, "E");
        layouts.push(l);
        if node < 4 {
            assignments.push(a);
        }
    }
    let placement = Placement {
        layouts,
        assignments,
        throughput: Vec::new(),
        host_components: vec!["lookup".into()],
    };
    let standby = (4..7).map(|node| InstanceId { node, slot: 0 }).collect();
    let workload = WorkloadSpec::new(
        "search",
        vec![Phase::queries(2000, 70.0, ArrivalKind::Poisson), Phase::queries(4000, 130.0, ArrivalKind::Poisson)],
        seed,
    );
    ResizeSetup {
        profiles,
        spec,
        placement,
        standby,
        workload,
        gpu_nodes: 7,
    }
}

#[derive(Debug, Serialize)]
pub struct ResizeOutcome {
    pub preload: bool,
    /// p95 over the middle 80% of the 70 qps phase.
    pub steady_p95_us: Micros,
    /// p95 over queries 4000..6000.
    pub window_p95_us: Micros,
    pub lost: usize,
    pub events: Vec<ResizeEvent>,
    pub report: RunReport,
}

impl ResizeOutcome {
    pub fn ratio(&self) -> f64 {
        self.window_p95_us as f64 / self.steady_p95_us as f64
    }
}

pub fn resize(preload: bool, seed: u64) -> Result<(Runtime, ResizeOutcome), BenchError> {
    let s = resize_setup(seed);
    let mut cfg = config(seed);
    cfg.load_delay_ms = RESIZE_LOAD_DELAY_MS;
    let mut rt = build_runtime(&s.profiles, s.gpu_nodes, 24, 2, &s.spec, &s.placement, cfg)?;
    let opts = RunOptions {
        resize: Some(ResizePlan {
            model: "E".into(),
            instances: s.standby.clone(),
            at_query: RESIZE_AT,
            preload,
        }),
        ..RunOptions::default()
    };
    let (out, report) = run(&mut rt, &s.workload, opts, &SloTarget::defaults())?;
    let steady_p95_us = report.stats_for(200..1800)?.p95_us;
    let window_p95_us = report.stats_for(4000..6000)?.p95_us;
    let outcome = ResizeOutcome {
        preload,
        steady_p95_us,
        window_p95_us,
        lost: report.failed,
        events: out.resize_events,
        report,
    };
    Ok((rt, outcome))
}

/// The bundled pipeline on five nodes with three instances of the fan-in stage.
pub fn incast_placement() -> Placement {
    let mut layouts = Vec::new();
    let mut assignments = Vec::new();
    let mut add = |node: u32, layout: Vec<u32>, models: &[&str]| {
        let l = MigLayout::new(layout);
        for (slot, (m, size)) in models.iter().zip(l.sizes()).enumerate() {
            assignments.push(Assignment {
                node,
                slot: slot as u32,
                size_gb: *size,
                model: (*m).to_string(),
            });
        }
        layouts.push(NodeLayout { node, layout: Some(l) });
    };
    for n in 0..3 {
        add(n, vec![24], &["B"]);
    }
    add(3, vec![6, 6, 6, 6], &["A", "C", "C", "C"]);
    add(4, vec![6, 6, 6, 6], &["A", "D", "D", "D"]);
    Placement {
        layouts,
        assignments,
        throughput: Vec::new(),
        host_components: Vec::new(),
    }
}

/// Drives `queries` through the bundled pipeline with wide network jitter so
/// upstream outputs reach the fan-in stage in either order.
pub fn incast(queries: u64, rate_qps: f64, net_jitter_us: Micros, seed: u64) -> Result<(Runtime, RunOutput), BenchError> {
    let problem = preflmr_problem();
    let spec = preflmr_pipeline();
    let cfg = RuntimeConfig {
        net_jitter_us,
        ..config(seed)
    };
    let mut rt = build_runtime(&problem.profiles, 5, 24, 0, &spec, &incast_placement(), cfg)?;
    let w = WorkloadSpec::new(&spec.name, vec![Phase::queries(queries, rate_qps, ArrivalKind::Poisson)], seed);
    let out = drive(&mut rt, &w, RunOptions::default())?;
    Ok((rt, out))
}

/// The planned bundled deployment at several fractions of its capacity.
pub fn load_sweep(fractions: &[f64], queries: u64, seed: u64, targets: &[SloTarget]) -> Result<Vec<RunReport>, BenchError> {
    let problem = preflmr_problem();
    let spec = preflmr_pipeline();
    let placement = plan(&problem)?;
    let cap = placement.min_qps();
    fractions
        .iter()
        .map(|f| {
            let mut rt = build_runtime(&problem.profiles, problem.nodes, problem.gpu_gb, 2, &spec, &placement, config(seed))?;
            let w = WorkloadSpec::new(&spec.name, vec![Phase::queries(queries, cap * f, ArrivalKind::Poisson)], seed);
            Ok(run(&mut rt, &w, RunOptions::default(), targets)?.1)
        })
        .collect()
}

