//! Browser bindings for three interactive views: planned versus monolithic
//! placement, the batch-size sweep, and the resize latency timeline.
//! Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sloserve::bench::scenarios;
use sloserve::bench::ResizeEvent;
use sloserve::planner::{monolithic_baseline, plan, Placement, PlacementProblem};

#[derive(Debug, Serialize)]
pub struct Slot {
    pub gb: u32,
    pub models: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct NodeView {
    pub node: u32,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Serialize)]
pub struct PlacementView {
    pub min_qps: f64,
    pub nodes: Vec<NodeView>,
    pub throughput: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
pub struct PlanView {
    pub planned: PlacementView,
    pub monolithic: PlacementView,
    pub ratio: f64,
}

fn view(p: &Placement) -> PlacementView {
    let nodes = p
        .layouts
        .iter()
        .map(|nl| NodeView {
            node: nl.node,
            slots: nl
                .layout
                .iter()
                .flat_map(|l| l.sizes().iter().copied().enumerate())
                .map(|(slot, gb)| Slot {
                    gb,
                    models: p
                        .assignments
                        .iter()
                        .filter(|a| a.node == nl.node && a.slot == slot as u32)
                        .map(|a| a.model.clone())
                        .collect(),
                })
                .collect(),
        })
        .collect();
    PlacementView {
        min_qps: p.min_qps(),
        nodes,
        throughput: p.throughput.iter().map(|t| (t.component.clone(), t.qps())).collect(),
    }
}

/// Planner and monolithic baseline for the bundled pipeline on `nodes` GPUs.
pub fn plan_view(nodes: u32) -> Result<PlanView, String> {
    let base = scenarios::preflmr_problem();
    let problem = PlacementProblem::new(nodes.clamp(2, 6), base.gpu_gb, base.layouts, base.components, base.profiles);
    let planned = plan(&problem).map_err(|e| e.to_string())?;
    let mono = monolithic_baseline(&problem).map_err(|e| e.to_string())?;
    Ok(PlanView {
        ratio: planned.min_qps() / mono.min_qps(),
        planned: view(&planned),
        monolithic: view(&mono),
    })
}

#[derive(Debug, Serialize)]
pub struct TimelineEvent {
    pub kind: &'static str,
    pub t_s: f64,
    pub instance: String,
}

#[derive(Debug, Serialize)]
pub struct Timeline {
    pub steady_p95_ms: f64,
    pub window_p95_ms: f64,
    pub ratio: f64,
    /// (arrival seconds, latency ms) for every `stride`-th query.
    pub points: Vec<(f64, f64)>,
    pub events: Vec<TimelineEvent>,
    pub resize_at_s: f64,
}

/// The two-phase surge with a scripted resize, with or without preloading.
pub fn resize_timeline(preload: bool, seed: u64, stride: usize) -> Result<Timeline, String> {
    let (_, o) = scenarios::resize(preload, seed).map_err(|e| e.to_string())?;
    let stride = stride.max(1);
    let points = o
        .report
        .rows
        .iter()
        .step_by(stride)
        .filter_map(|r| r.latency_us.map(|l| (r.arrival_us as f64 / 1e6, l as f64 / 1e3)))
        .collect();
    let resize_at_s = o
        .report
        .rows
        .get(scenarios::RESIZE_AT as usize)
        .map_or(0.0, |r| r.arrival_us as f64 / 1e6);
    let events = o
        .events
        .iter()
        .map(|e| {
            let (kind, ts, instance) = match e {
                ResizeEvent::SurgeDetected { ts, .. } => ("surge detected", *ts, String::new()),
                ResizeEvent::Preloaded { ts, instance } => ("preload", *ts, instance.to_string()),
                ResizeEvent::Activated { ts, instance } => ("activate", *ts, instance.to_string()),
                ResizeEvent::ColdJoined { ts, instance } => ("cold join", *ts, instance.to_string()),
            };
            TimelineEvent {
                kind,
                t_s: ts as f64 / 1e6,
                instance,
            }
        })
        .collect();
    Ok(Timeline {
        steady_p95_ms: o.steady_p95_us as f64 / 1e3,
        window_p95_ms: o.window_p95_us as f64 / 1e3,
        ratio: o.ratio(),
        points,
        events,
        resize_at_s,
    })
}

fn json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("view serializes"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen]
pub fn plan_demo(nodes: u32) -> String {
    json(plan_view(nodes))
}

#[wasm_bindgen]
pub fn batch_sweep_demo(offered_qps: f64, duration_ms: f64) -> String {
    let caps = [1, 2, 4, 8, 16, 32];
    json(scenarios::batch_sweep(&caps, offered_qps.max(1.0), duration_ms.clamp(500.0, 20_000.0), 7).map_err(|e| e.to_string()))
}

#[wasm_bindgen]
pub fn resize_demo(preload: bool, seed: u32) -> String {
    json(resize_timeline(preload, u64::from(seed), 5))
}
