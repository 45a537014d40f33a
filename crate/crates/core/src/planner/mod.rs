//! Static placement of model replicas onto MIG-partitioned GPUs.
//!
//! Every node picks exactly one layout from the allowed set; every slice of
//! that layout holds at most one replica. A model's throughput is the sum of
//! its profiled peak throughput over its replicas, and the planner maximizes
//! the sorted vector of per-component throughputs lexicographically: first the
//! weakest component, then the next weakest, and so on.
//!
//! Throughputs are carried as integer milli-qps so that comparisons between
//! placements are exact.

mod solve;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecError, InstanceSize, MigLayout, ProfileSet, DEFAULT_GPU_GB};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid placement: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidPlacement(Vec<Violation>),
    #[error("bad problem: {0}")]
    BadProblem(String),
    #[error(transparent)]
    Profile(#[from] ExecError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    pub model: String,
    /// Largest batch compatible with the component's latency target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<u32>,
}

/// The on-disk problem description; profiles are included by path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub nodes: u32,
    #[serde(default = "default_gpu_gb")]
    pub gpu_gb: u32,
    pub layouts: Vec<MigLayout>,
    pub components: Vec<ComponentSpec>,
    pub profiles_csv: String,
}

fn default_gpu_gb() -> u32 {
    DEFAULT_GPU_GB
}

#[derive(Debug, Clone)]
pub struct PlacementProblem {
    pub nodes: u32,
    pub gpu_gb: u32,
    pub layouts: Vec<MigLayout>,
    pub components: Vec<ComponentSpec>,
    pub profiles: ProfileSet,
}

/// Components that share a model are served by one pooled set of replicas.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ModelGroup {
    pub model: String,
    pub components: Vec<String>,
    pub max_batch: Option<u32>,
}

impl PlacementProblem {
    pub fn new(nodes: u32, gpu_gb: u32, layouts: Vec<MigLayout>, components: Vec<ComponentSpec>, profiles: ProfileSet) -> Self {
        Self {
            nodes,
            gpu_gb,
            layouts,
            components,
            profiles,
        }
    }

    pub fn from_file(file: ProblemFile, profiles: ProfileSet) -> Self {
        Self::new(file.nodes, file.gpu_gb, file.layouts, file.components, profiles)
    }

    /// Reads a problem JSON; `profiles_csv` is resolved relative to the JSON file.
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let io = |source| PlanError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        let file: ProblemFile = serde_json::from_str(&text)?;
        let csv_path = path.parent().unwrap_or(Path::new(".")).join(&file.profiles_csv);
        let csv = std::fs::read(&csv_path).map_err(|source| PlanError::Io {
            path: csv_path.clone(),
            source,
        })?;
        Ok(Self::from_file(file, ProfileSet::from_csv(csv.as_slice())?))
    }

    pub(crate) fn groups(&self) -> Vec<ModelGroup> {
        let mut out: Vec<ModelGroup> = Vec::new();
        for c in &self.components {
            match out.iter_mut().find(|g| g.model == c.model) {
                Some(g) => {
                    g.components.push(c.id.clone());
                    g.max_batch = match (g.max_batch, c.max_batch) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                }
                None => out.push(ModelGroup {
                    model: c.model.clone(),
                    components: vec![c.id.clone()],
                    max_batch: c.max_batch,
                }),
            }
        }
        out
    }

    fn check(&self) -> Result<(), PlanError> {
        if self.layouts.is_empty() {
            return Err(PlanError::BadProblem("no layouts allowed".into()));
        }
        if self.components.is_empty() {
            return Err(PlanError::BadProblem("no components".into()));
        }
        for l in &self.layouts {
            l.validate(self.gpu_gb)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.components {
            if !seen.insert(&c.id) {
                return Err(PlanError::BadProblem(format!("duplicate component id {}", c.id)));
            }
            self.profiles.get(&c.model)?;
        }
        Ok(())
    }

    /// True for models profiled only on host workers; they are not packed onto GPUs.
    pub fn is_host_model(&self, model: &str) -> bool {
        self.profiles
            .get(model)
            .map(|p| p.sizes().iter().all(|s| *s == InstanceSize::Host))
            .unwrap_or(false)
    }

    /// Profiled peak throughput of `model` on a slice, in milli-qps; `None` if it does not fit.
    pub(crate) fn t_milli(&self, model: &str, size_gb: u32, max_batch: Option<u32>) -> Option<u64> {
        let p = self.profiles.get(model).ok()?;
        let size = InstanceSize::Gb(size_gb);
        if !p.fits(size) {
            return None;
        }
        p.peak_throughput(size, max_batch).map(to_milli)
    }
}

pub(crate) fn to_milli(qps: f64) -> u64 {
    (qps * 1000.0).round().max(0.0) as u64
}

/// y variable: the layout chosen for a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLayout {
    pub node: u32,
    pub layout: Option<MigLayout>,
}

/// x variable: one replica of `model` on slice `slot` (of `size_gb`) of `node`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment {
    pub node: u32,
    pub slot: u32,
    pub size_gb: u32,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentThroughput {
    pub component: String,
    pub model: String,
    pub milli_qps: u64,
}

impl ComponentThroughput {
    pub fn qps(&self) -> f64 {
        self.milli_qps as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub layouts: Vec<NodeLayout>,
    pub assignments: Vec<Assignment>,
    pub throughput: Vec<ComponentThroughput>,
    /// Components served from the host pool instead of GPU slices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub host_components: Vec<String>,
}

impl Placement {
    /// Minimum component throughput in milli-qps.
    pub fn min_milli_qps(&self) -> u64 {
        self.throughput.iter().map(|t| t.milli_qps).min().unwrap_or(0)
    }

    pub fn min_qps(&self) -> f64 {
        self.min_milli_qps() as f64 / 1000.0
    }

    /// Per-model throughput values sorted ascending (one entry per model group).
    pub fn sorted_vector(&self) -> Vec<u64> {
        let mut per_model: BTreeMap<&str, u64> = BTreeMap::new();
        for t in &self.throughput {
            per_model.insert(&t.model, t.milli_qps);
        }
        let mut v: Vec<u64> = per_model.into_values().collect();
        v.sort_unstable();
        v
    }

    pub fn replicas(&self) -> usize {
        self.assignments.len()
    }

    pub fn replicas_of(&self, model: &str) -> Vec<&Assignment> {
        self.assignments.iter().filter(|a| a.model == model).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable layout and throughput table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("node  layout        slots\n");
        for nl in &self.layouts {
            let layout = nl.layout.as_ref().map_or("-".to_string(), ToString::to_string);
            let mut slots: Vec<String> = Vec::new();
            if let Some(l) = &nl.layout {
                for (slot, size) in l.sizes().iter().enumerate() {
                    let models: Vec<&str> = self
                        .assignments
                        .iter()
                        .filter(|a| a.node == nl.node && a.slot == slot as u32)
                        .map(|a| a.model.as_str())
                        .collect();
                    let label = if models.is_empty() { "idle".to_string() } else { models.join("+") };
                    slots.push(format!("{size}G:{label}"));
                }
            }
            out.push_str(&format!("{:<5} {:<13} {}\n", nl.node, layout, slots.join(" ")));
        }
        out.push_str("\ncomponent  model        qps\n");
        for t in &self.throughput {
            out.push_str(&format!("{:<10} {:<10} {:>9.3}\n", t.component, t.model, t.qps()));
        }
        for h in &self.host_components {
            out.push_str(&format!("{h:<10} (host pool)\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    Layout,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub node: u32,
    pub model: Option<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.constraint {
            Constraint::Layout => "LayoutViolation",
            Constraint::Memory => "MemoryViolation",
        };
        write!(f, "{kind} node {}", self.node)?;
        if let Some(m) = &self.model {
            write!(f, " model {m}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Checks one-layout-per-GPU and memory fit. Empty iff the placement is valid.
pub fn validate(placement: &Placement, problem: &PlacementProblem) -> Vec<Violation> {
    let mut out = Vec::new();
    let layout_v = |node, detail: String| Violation {
        constraint: Constraint::Layout,
        node,
        model: None,
        detail,
    };
    for node in 0..problem.nodes {
        let chosen: Vec<&NodeLayout> = placement.layouts.iter().filter(|l| l.node == node).collect();
        match chosen.as_slice() {
            [one] => match &one.layout {
                None => out.push(layout_v(node, "no layout chosen".into())),
                Some(l) if l.validate(problem.gpu_gb).is_err() => {
                    out.push(layout_v(node, format!("layout {l} does not partition a {} GB GPU", problem.gpu_gb)))
                }
                Some(_) => {}
            },
            [] => out.push(layout_v(node, "no layout chosen".into())),
            many => out.push(layout_v(node, format!("{} layouts chosen", many.len()))),
        }
    }
    let mut per_slot: BTreeMap<(u32, u32), Vec<&Assignment>> = BTreeMap::new();
    for a in &placement.assignments {
        per_slot.entry((a.node, a.slot)).or_default().push(a);
    }
    for ((node, slot), assigned) in per_slot {
        let layout = placement
            .layouts
            .iter()
            .find(|l| l.node == node)
            .and_then(|l| l.layout.as_ref());
        let Some(size) = layout.and_then(|l| l.sizes().get(slot as usize)).copied() else {
            out.push(Violation {
                constraint: Constraint::Layout,
                node,
                model: Some(assigned[0].model.clone()),
                detail: format!("slot {slot} does not exist in the chosen layout"),
            });
            continue;
        };
        let mut used = 0.0;
        for a in &assigned {
            let r = problem
                .profiles
                .get(&a.model)
                .ok()
                .and_then(|p| p.memory_gb(InstanceSize::Gb(size)));
            if a.size_gb != size {
                out.push(Violation {
                    constraint: Constraint::Layout,
                    node,
                    model: Some(a.model.clone()),
                    detail: format!("slot {slot} is {size} GB, assignment says {} GB", a.size_gb),
                });
            }
            match r {
                Some(r) if r <= f64::from(size) => used += r,
                Some(r) => {
                    used += r;
                    out.push(Violation {
                        constraint: Constraint::Memory,
                        node,
                        model: Some(a.model.clone()),
                        detail: format!("needs {r} GB on a {size} GB slot"),
                    });
                }
                None => out.push(Violation {
                    constraint: Constraint::Memory,
                    node,
                    model: Some(a.model.clone()),
                    detail: format!("no profile for a {size} GB slot"),
                }),
            }
        }
        if assigned.len() > 1 && used > f64::from(size) + 1e-9 {
            out.push(Violation {
                constraint: Constraint::Memory,
                node,
                model: None,
                detail: format!("co-resident models need {used} GB on a {size} GB slot"),
            });
        }
    }
    out
}

/// Per-model throughput in milli-qps. Models that share a slice time-share it:
/// each of them gets `1 / sum(1 / T)` over the co-resident set.
fn model_throughputs(placement: &Placement, problem: &PlacementProblem) -> BTreeMap<String, u64> {
    let groups = problem.groups();
    let cap_of = |model: &str| groups.iter().find(|g| g.model == model).and_then(|g| g.max_batch);
    let mut per_slot: BTreeMap<(u32, u32), Vec<&Assignment>> = BTreeMap::new();
    for a in &placement.assignments {
        per_slot.entry((a.node, a.slot)).or_default().push(a);
    }
    let mut out: BTreeMap<String, u64> = BTreeMap::new();
    for assigned in per_slot.values() {
        let ts: Vec<Option<u64>> = assigned
            .iter()
            .map(|a| problem.t_milli(&a.model, a.size_gb, cap_of(&a.model)))
            .collect();
        let share = if assigned.len() == 1 {
            ts[0]
        } else if ts.iter().all(|t| t.is_some_and(|t| t > 0)) {
            let inv: f64 = ts.iter().map(|t| 1.0 / t.unwrap() as f64).sum();
            Some((1.0 / inv).round() as u64)
        } else {
            None
        };
        for a in assigned {
            *out.entry(a.model.clone()).or_default() += share.unwrap_or(0);
        }
    }
    out
}

fn throughput_vector(placement: &Placement, problem: &PlacementProblem) -> Vec<ComponentThroughput> {
    let per_model = model_throughputs(placement, problem);
    problem
        .components
        .iter()
        .filter(|c| !problem.is_host_model(&c.model))
        .map(|c| ComponentThroughput {
            component: c.id.clone(),
            model: c.model.clone(),
            milli_qps: per_model.get(&c.model).copied().unwrap_or(0),
        })
        .collect()
}

/// Sum of profiled throughput over the component's replicas, in qps.
pub fn component_throughput(placement: &Placement, problem: &PlacementProblem, component: &str) -> Result<f64, PlanError> {
    let violations = validate(placement, problem);
    if !violations.is_empty() {
        return Err(PlanError::InvalidPlacement(violations));
    }
    let c = problem
        .components
        .iter()
        .find(|c| c.id == component)
        .ok_or_else(|| PlanError::BadProblem(format!("unknown component {component}")))?;
    let per_model = model_throughputs(placement, problem);
    Ok(per_model.get(&c.model).copied().unwrap_or(0) as f64 / 1000.0)
}

/// Builds a placement from per-node (layout, slot models) choices.
pub(crate) fn assemble(problem: &PlacementProblem, nodes: Vec<(MigLayout, Vec<Vec<String>>)>) -> Placement {
    let mut layouts = Vec::new();
    let mut assignments = Vec::new();
    for (node, (layout, slots)) in nodes.into_iter().enumerate() {
        for (slot, models) in slots.into_iter().enumerate() {
            for model in models {
                assignments.push(Assignment {
                    node: node as u32,
                    slot: slot as u32,
                    size_gb: layout.sizes()[slot],
                    model,
                });
            }
        }
        layouts.push(NodeLayout {
            node: node as u32,
            layout: Some(layout),
        });
    }
    let mut p = Placement {
        layouts,
        assignments,
        throughput: Vec::new(),
        host_components: problem
            .components
            .iter()
            .filter(|c| problem.is_host_model(&c.model))
            .map(|c| c.id.clone())
            .collect(),
    };
    p.throughput = throughput_vector(&p, problem);
    p
}

/// Recomputes the throughput vector of a hand-built placement.
pub fn with_throughput(mut placement: Placement, problem: &PlacementProblem) -> Placement {
    placement.throughput = throughput_vector(&placement, problem);
    placement
}

/// Optimal placement; see the module docs for the objective.
///
/// Among optimal placements the one with the fewest replicas wins, then the
/// first one in the solver's deterministic search order.
pub fn plan(problem: &PlacementProblem) -> Result<Placement, PlanError> {
    problem.check()?;
    let nodes = solve::solve(problem)?;
    Ok(assemble(problem, nodes))
}

/// Every node runs the full GPU with one co-resident replica of every model.
pub fn monolithic_baseline(problem: &PlacementProblem) -> Result<Placement, PlanError> {
    problem.check()?;
    let full = MigLayout::full(problem.gpu_gb);
    let mut models: Vec<String> = Vec::new();
    let mut used = 0.0;
    for g in problem.groups() {
        if problem.is_host_model(&g.model) {
            continue;
        }
        let r = problem
            .profiles
            .get(&g.model)?
            .memory_gb(InstanceSize::Gb(problem.gpu_gb))
            .ok_or_else(|| PlanError::Infeasible(format!("model {} has no full-GPU profile", g.model)))?;
        used += r;
        models.push(g.model);
    }
    if used > f64::from(problem.gpu_gb) + 1e-9 {
        return Err(PlanError::Infeasible(format!(
            "models need {used} GB together but a GPU has {} GB",
            problem.gpu_gb
        )));
    }
    let nodes = (0..problem.nodes).map(|_| (full.clone(), vec![models.clone()])).collect();
    Ok(assemble(problem, nodes))
}
