//! Simulated accelerator backend.
//!
//! Nodes carry one GPU that is split into MIG slices according to a layout.
//! Each slice (or host-CPU worker) is an [`AcceleratorInstance`]: a serial
//! resource whose batch latency comes from the component profile, with
//! optional seeded multiplicative jitter. Busy intervals are recorded so
//! utilization (GRACT) can be computed over any window.

mod instance;
mod profile;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use instance::{AcceleratorInstance, BatchTiming, BusyInterval, InstanceId, InstanceState};
pub use profile::{ComponentProfile, InstanceSize, ProfileEntry, ProfileSet, MIG_SIZES};

use crate::clock::Micros;

pub const DEFAULT_GPU_GB: u32 = 24;
pub const DEFAULT_LOAD_DELAY_MS: f64 = 3000.0;
pub const DEFAULT_JITTER: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("no profile for model {0} at instance size {1}")]
    NoProfile(String, InstanceSize),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("bad profile: {0}")]
    BadProfile(String),
    #[error("model {model} needs {need_gb} GB but instance {instance} has {free_gb} GB free")]
    OutOfMemory {
        instance: InstanceId,
        model: String,
        need_gb: f64,
        free_gb: f64,
    },
    #[error("model {model} is not loaded on instance {instance}")]
    ColdInstance { instance: InstanceId, model: String },
    #[error("instance {0} is {1:?} and cannot run batches")]
    NotServing(InstanceId, InstanceState),
    #[error("instance {instance}: cannot go from {from:?} to {to:?}")]
    BadTransition {
        instance: InstanceId,
        from: InstanceState,
        to: InstanceState,
    },
    #[error("layout {0} is invalid for a {1} GB GPU")]
    BadLayout(MigLayout, u32),
    #[error("node {0} has instances in service")]
    NodeBusy(u32),
    #[error("no such node {0}")]
    NoSuchNode(u32),
    #[error("no such instance {0}")]
    NoSuchInstance(InstanceId),
    #[error("empty or inverted window [{0}, {1})")]
    BadRange(Micros, Micros),
}

/// Multiset of MIG slice sizes (GB), kept in descending order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct MigLayout(Vec<u32>);

impl MigLayout {
    pub fn new(mut sizes: Vec<u32>) -> Self {
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        Self(sizes)
    }

    pub fn full(gpu_gb: u32) -> Self {
        Self(vec![gpu_gb])
    }

    pub fn sizes(&self) -> &[u32] {
        &self.0
    }

    pub fn total_gb(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn validate(&self, gpu_gb: u32) -> Result<(), ExecError> {
        let ok = !self.0.is_empty() && self.total_gb() == gpu_gb && self.0.iter().all(|s| MIG_SIZES.contains(s));
        if ok {
            Ok(())
        } else {
            Err(ExecError::BadLayout(self.clone(), gpu_gb))
        }
    }

    /// The four layouts of a 24 GB GPU used throughout: [24], [12,12], [12,6,6], [6,6,6,6].
    pub fn standard() -> Vec<MigLayout> {
        vec![
            MigLayout::new(vec![24]),
            MigLayout::new(vec![12, 12]),
            MigLayout::new(vec![12, 6, 6]),
            MigLayout::new(vec![6, 6, 6, 6]),
        ]
    }
}

impl From<Vec<u32>> for MigLayout {
    fn from(v: Vec<u32>) -> Self {
        MigLayout::new(v)
    }
}

impl From<MigLayout> for Vec<u32> {
    fn from(l: MigLayout) -> Self {
        l.0
    }
}

impl fmt::Display for MigLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Seeded multiplicative latency noise, uniform in `[1 - eps, 1 + eps]`.
#[derive(Debug, Clone)]
pub struct Jitter {
    eps: f64,
    rng: ChaCha8Rng,
}

impl Jitter {
    pub fn new(eps: f64, seed: u64) -> Self {
        Self {
            eps: eps.clamp(0.0, 0.99),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0)
    }

    pub fn factor(&mut self) -> f64 {
        if self.eps == 0.0 {
            1.0
        } else {
            self.rng.random_range(1.0 - self.eps..=1.0 + self.eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: u32,
    pub gpu_gb: u32,
    pub layout: Option<MigLayout>,
    pub host: bool,
}

/// All nodes and their instances.
#[derive(Debug, Clone, Default)]
pub struct Cluster {
    nodes: Vec<Node>,
    instances: BTreeMap<InstanceId, AcceleratorInstance>,
}

impl Cluster {
    /// `gpu_nodes` GPU nodes with ids `0..gpu_nodes`, not yet partitioned.
    pub fn new(gpu_nodes: u32, gpu_gb: u32) -> Self {
        let nodes = (0..gpu_nodes)
            .map(|id| Node {
                id,
                gpu_gb,
                layout: None,
                host: false,
            })
            .collect();
        Self {
            nodes,
            instances: BTreeMap::new(),
        }
    }

    /// Adds a host-CPU node with `workers` instances and returns its id.
    pub fn add_host_node(&mut self, workers: u32) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            id,
            gpu_gb: 0,
            layout: None,
            host: true,
        });
        for slot in 0..workers {
            let iid = InstanceId { node: id, slot };
            self.instances.insert(iid, AcceleratorInstance::new(iid, InstanceSize::Host));
        }
        id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> Result<&Node, ExecError> {
        self.nodes.get(id as usize).ok_or(ExecError::NoSuchNode(id))
    }

    /// Replaces a node's GPU slices with fresh, empty ones matching `layout`.
    pub fn partition_node(&mut self, node: u32, layout: &MigLayout) -> Result<Vec<InstanceId>, ExecError> {
        let n = self.nodes.get(node as usize).ok_or(ExecError::NoSuchNode(node))?;
        if n.host {
            return Err(ExecError::BadLayout(layout.clone(), 0));
        }
        layout.validate(n.gpu_gb)?;
        let busy = self
            .instances
            .values()
            .any(|i| i.id.node == node && i.state() != InstanceState::Empty);
        if busy {
            return Err(ExecError::NodeBusy(node));
        }
        self.instances.retain(|id, _| id.node != node);
        let ids: Vec<InstanceId> = (0..layout.sizes().len() as u32).map(|slot| InstanceId { node, slot }).collect();
        for (id, size) in ids.iter().zip(layout.sizes()) {
            self.instances.insert(*id, AcceleratorInstance::new(*id, InstanceSize::Gb(*size)));
        }
        self.nodes[node as usize].layout = Some(layout.clone());
        Ok(ids)
    }

    pub fn instance(&self, id: InstanceId) -> Result<&AcceleratorInstance, ExecError> {
        self.instances.get(&id).ok_or(ExecError::NoSuchInstance(id))
    }

    pub fn instance_mut(&mut self, id: InstanceId) -> Result<&mut AcceleratorInstance, ExecError> {
        self.instances.get_mut(&id).ok_or(ExecError::NoSuchInstance(id))
    }

    pub fn instances(&self) -> impl Iterator<Item = &AcceleratorInstance> {
        self.instances.values()
    }

    /// Size-weighted GRACT of a node's GPU over `[from, to)`.
    pub fn node_gract(&self, node: u32, from: Micros, to: Micros) -> Result<f64, ExecError> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in self.instances.values().filter(|i| i.id.node == node) {
            let w = i.size.gb().map_or(1.0, f64::from);
            num += w * i.gract(from, to)?;
            den += w;
        }
        if den == 0.0 {
            return Err(ExecError::NoSuchNode(node));
        }
        Ok(num / den)
    }

    /// CSV rows `node, instance, window_start_us, gract` for consecutive windows of `window_us` over `[from, to)`.
    pub fn write_gract_csv<W: Write>(&self, out: W, from: Micros, to: Micros, window_us: Micros) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "instance", "window_start_us", "gract"])?;
        for i in self.instances.values().filter(|i| i.size != InstanceSize::Host) {
            for (start, g) in gract_series(i.busy_intervals(), from, to, window_us) {
                w.write_record([i.id.node.to_string(), i.id.slot.to_string(), start.to_string(), format!("{g:.6}")])?;
            }
        }
        w.flush()
    }
}

/// Per-window GRACT values over `[from, to)`; the last window may be short.
pub fn gract_series(busy: &[BusyInterval], from: Micros, to: Micros, window_us: Micros) -> Vec<(Micros, f64)> {
    let window_us = window_us.max(1);
    let mut out = Vec::new();
    let mut start = from;
    while start < to {
        let end = (start + window_us).min(to);
        if let Ok(g) = instance::gract_of(busy, start, end) {
            out.push((start, g));
        }
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_layouts() {
        let mut c = Cluster::new(2, 24);
        assert_eq!(c.partition_node(0, &MigLayout::new(vec![12, 6, 6])).unwrap().len(), 3);
        assert!(matches!(
            c.partition_node(1, &MigLayout::new(vec![12, 12, 6])),
            Err(ExecError::BadLayout(..))
        ));
        assert!(matches!(c.partition_node(1, &MigLayout::new(vec![8, 8, 8])), Err(ExecError::BadLayout(..))));
        assert_eq!(c.partition_node(1, &MigLayout::new(vec![24])).unwrap().len(), 1);
    }

    #[test]
    fn busy_node_cannot_be_repartitioned() {
        let mut c = Cluster::new(1, 24);
        let ids = c.partition_node(0, &MigLayout::full(24)).unwrap();
        c.instance_mut(ids[0]).unwrap().install("m", 1.0).unwrap();
        assert_eq!(c.partition_node(0, &MigLayout::full(24)), Err(ExecError::NodeBusy(0)));
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let mut a = Jitter::new(0.05, 9);
        let mut b = Jitter::new(0.05, 9);
        for _ in 0..1000 {
            let f = a.factor();
            assert_eq!(f, b.factor());
            assert!((0.95..=1.05).contains(&f));
        }
        assert_eq!(Jitter::none().factor(), 1.0);
    }

    #[test]
    fn layout_json_is_a_plain_list() {
        let l: MigLayout = serde_json::from_str("[6,12,6]").unwrap();
        assert_eq!(l.sizes(), &[12, 6, 6]);
        assert_eq!(serde_json::to_string(&l).unwrap(), "[12,6,6]");
    }
}
