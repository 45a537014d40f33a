//! Pipeline execution over component pools.
//!
//! A query enters at ingress, where the balancing choice for every stage is
//! made once and stored as routing tags. Each stage output travels to the
//! tagged instance of the next stage as a routed trigger-put through the
//! store; fan-in stages hold inputs in a join buffer until the matched set is
//! complete. Every (instance, model) pair has a pending queue, and an idle
//! instance drains up to `max_batch` of its oldest entries as one batch.
//! Results of a batch bound for the same node leave as one coalesced send.
//!
//! The whole runtime advances on a single discrete-event loop over a manual
//! clock, so a run is a pure function of its inputs and seed.

mod batch;
mod join;
mod spec;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{form_batch, Batch};
pub use join::JoinBuffer;
pub use spec::{EdgeSpec, Ingress, PipelineGraph, PipelineSpec, StageSpec};

use crate::clock::{ms_to_us, Clock, ManualClock, Micros};
use crate::executor::{Cluster, ExecError, InstanceId, InstanceSize, InstanceState, Jitter, ProfileSet, DEFAULT_JITTER, DEFAULT_LOAD_DELAY_MS};
use crate::kvs::{HandlerId, Key, Kvs, KvsError, NodeId, ShardId, TriggerHandler, Upcall};
use crate::planner::Placement;

pub type QueryId = u64;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("component for model {0} is already registered")]
    AlreadyRegistered(String),
    #[error("pipeline is not a DAG: {0}")]
    NotADag(String),
    #[error("bad pipeline spec: {0}")]
    BadSpec(String),
    #[error("stage {stage}: no replica of model {model} in the placement")]
    Unschedulable { stage: String, model: String },
    #[error("pipeline {0} is already loaded")]
    PipelineExists(String),
    #[error("no such pipeline {0}")]
    NoSuchPipeline(String),
    #[error("pipeline {0} is draining")]
    Draining(String),
    #[error("stage {0} has no active instance")]
    NoWorker(String),
    #[error("query {query}: second input from {upstream} at stage {stage}")]
    DuplicateInput { query: QueryId, stage: String, upstream: String },
    #[error("drain timed out with {0} queries in flight")]
    DrainTimeout(usize),
    #[error("no such model {0}")]
    NoSuchModel(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Kvs(#[from] KvsError),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

/// A stage implementation. `process` runs once per query in a batch;
/// `on_trigger` observes every handoff the store delivers for the model.
pub trait Component: Send + Sync {
    fn process(&self, key: &Key, inputs: &[Bytes]) -> Bytes;

    fn on_trigger(&self, _key: &Key, _payload: &Bytes) {}
}

/// Passes its first input through unchanged.
#[derive(Debug, Default)]
pub struct Echo;

impl Component for Echo {
    fn process(&self, _key: &Key, inputs: &[Bytes]) -> Bytes {
        inputs.first().cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub seed: u64,
    /// One-way delay between instances on the same node.
    pub local_hop_us: Micros,
    /// One-way delay between nodes (ingress is its own node).
    pub remote_hop_us: Micros,
    /// Extra uniform delay in `[0, net_jitter_us]` on every remote send.
    pub net_jitter_us: Micros,
    /// Multiplicative batch-latency noise `U[1 - eps, 1 + eps]`.
    pub latency_jitter: f64,
    pub load_delay_ms: f64,
    pub load_delay_overrides_ms: BTreeMap<String, f64>,
    /// Partial matched sets older than this fail with IncastTimeout.
    pub incast_timeout_ms: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            local_hop_us: 20,
            remote_hop_us: 200,
            net_jitter_us: 100,
            latency_jitter: DEFAULT_JITTER,
            load_delay_ms: DEFAULT_LOAD_DELAY_MS,
            load_delay_overrides_ms: BTreeMap::new(),
            incast_timeout_ms: 10_000.0,
        }
    }
}

impl RuntimeConfig {
    pub fn load_delay_us(&self, model: &str) -> Micros {
        ms_to_us(*self.load_delay_overrides_ms.get(model).unwrap_or(&self.load_delay_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StageTimes {
    pub instance: InstanceId,
    pub enqueue_us: Micros,
    pub dispatch_us: Micros,
    pub complete_us: Micros,
    pub emit_us: Micros,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum QueryStatus {
    InFlight,
    Completed,
    Failed(String),
}

/// One upstream output (or the ingress payload) reaching an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub ts: Micros,
    pub stage: String,
    pub from: Option<String>,
    pub instance: InstanceId,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryRecord {
    pub id: QueryId,
    pub pipeline: String,
    #[serde(skip)]
    pub payload: Bytes,
    /// Fixed at ingress, never changed.
    pub tags: BTreeMap<String, InstanceId>,
    /// Pool index each tag was drawn at; used when a tagged instance has vanished.
    pub tag_slots: BTreeMap<String, usize>,
    /// Destinations used instead of a vanished tagged instance.
    pub reroutes: BTreeMap<String, InstanceId>,
    pub ingress_us: Micros,
    pub egress_us: Option<Micros>,
    pub stages: BTreeMap<String, StageTimes>,
    pub deliveries: Vec<Delivery>,
    pub status: QueryStatus,
    #[serde(skip)]
    pub result: Option<Bytes>,
    #[serde(skip)]
    pipeline_idx: usize,
    #[serde(skip)]
    open: BTreeSet<usize>,
}

impl QueryRecord {
    pub fn latency_us(&self) -> Option<Micros> {
        self.egress_us.map(|e| e - self.ingress_us)
    }

    pub fn destination(&self, stage: &str) -> Option<InstanceId> {
        self.reroutes.get(stage).or_else(|| self.tags.get(stage)).copied()
    }
}

/// One row of the stage execution log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecRow {
    pub query_id: QueryId,
    pub stage: String,
    pub instance: InstanceId,
    pub enqueue_us: Micros,
    pub dispatch_us: Micros,
    pub complete_us: Micros,
    pub emit_us: Micros,
    pub batch_size: usize,
}

/// One coalesced transfer: `count` results from `from` (None = ingress) to `to_node`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SendRecord {
    pub ts: Micros,
    pub from: Option<InstanceId>,
    pub to_node: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RuntimeEvent {
    TagViolation { ts: Micros, query: QueryId, stage: String, tagged: InstanceId, used: InstanceId },
    IncastTimeout { ts: Micros, query: QueryId, stage: String },
    DuplicateInput { ts: Micros, query: QueryId, stage: String, upstream: String },
    QueryFailed { ts: Micros, query: QueryId, reason: String },
    Preloading { ts: Micros, instance: InstanceId, model: String },
    ColdJoin { ts: Micros, instance: InstanceId, model: String },
    LoadComplete { ts: Micros, instance: InstanceId },
    Activated { ts: Micros, instance: InstanceId },
    Draining { ts: Micros, instance: InstanceId },
    Drained { ts: Micros, instance: InstanceId },
    InstanceFailed { ts: Micros, instance: InstanceId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RuntimeStats {
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub in_flight: u64,
}

#[derive(Debug)]
enum Ev {
    Deliver { query: QueryId, stage: usize, from: Option<usize>, payload: Bytes },
    BatchDone(InstanceId),
    LoadDone(InstanceId),
    JoinCheck { pipeline: usize, stage: usize, query: QueryId },
}

#[derive(Debug)]
struct Scheduled {
    t: Micros,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.t, o.seq).cmp(&(self.t, self.seq))
    }
}

struct PipelineRt {
    graph: PipelineGraph,
    models: Vec<usize>,
    joins: Vec<Option<JoinBuffer>>,
    draining: bool,
    in_flight: usize,
}

struct ModelRt {
    name: String,
    pool: Vec<InstanceId>,
    shard: ShardId,
    max_batch: u32,
    arrivals: u64,
    groups: Vec<String>,
}

struct Pending {
    query: QueryId,
    pipeline: usize,
    stage: usize,
    enqueue: Micros,
    cap: usize,
    key: Key,
    inputs: Vec<Bytes>,
}

#[derive(Default)]
struct Worker {
    queue: VecDeque<Pending>,
    reported_depth: usize,
    outstanding: usize,
}

#[derive(Default)]
struct InstRt {
    running: Option<(usize, Vec<Pending>)>,
    wedged: bool,
    failed: bool,
    wake_scheduled: bool,
}

type Mailbox = Arc<Mutex<Vec<(NodeId, String)>>>;

struct TriggerAdapter {
    component: Arc<dyn Component>,
    mailbox: Mailbox,
}

impl TriggerHandler for TriggerAdapter {
    fn on_trigger(&self, up: &Upcall<'_>) {
        self.component.on_trigger(up.key, up.payload);
        self.mailbox.lock().expect("mailbox").push((up.node, up.key.to_string()));
    }
}

fn kvs_node(id: InstanceId) -> NodeId {
    (id.node << 8) | id.slot
}

fn from_kvs_node(n: NodeId) -> InstanceId {
    InstanceId { node: n >> 8, slot: n & 0xff }
}

const MODEL_PREFIX: &str = "/models";

pub struct Runtime {
    config: RuntimeConfig,
    clock: Arc<ManualClock>,
    cluster: Cluster,
    profiles: ProfileSet,
    kvs: Kvs,
    mailbox: Mailbox,
    components: BTreeMap<String, (HandlerId, Arc<dyn Component>)>,
    next_handler: u32,
    models: Vec<ModelRt>,
    model_index: BTreeMap<String, usize>,
    pipelines: Vec<PipelineRt>,
    pipeline_index: BTreeMap<String, usize>,
    workers: BTreeMap<(InstanceId, usize), Worker>,
    insts: BTreeMap<InstanceId, InstRt>,
    queries: Vec<QueryRecord>,
    events: BinaryHeap<Scheduled>,
    seq: u64,
    ingress_rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    jitter: Jitter,
    link_free: BTreeMap<(Option<u32>, u32), Micros>,
    weights: BTreeMap<(String, InstanceSize), f64>,
    exec_log: Vec<ExecRow>,
    batches: Vec<Batch>,
    sends: Vec<SendRecord>,
    log: Vec<RuntimeEvent>,
    stats: RuntimeStats,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("now", &self.now())
            .field("pipelines", &self.pipeline_index.keys().collect::<Vec<_>>())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Runtime {
    pub fn new(cluster: Cluster, profiles: ProfileSet, config: RuntimeConfig) -> Self {
        let clock = Arc::new(ManualClock::new(0));
        let seed = config.seed;
        Self {
            kvs: Kvs::new(clock.clone(), seed),
            clock,
            cluster,
            profiles,
            mailbox: Arc::default(),
            components: BTreeMap::new(),
            next_handler: 1,
            models: Vec::new(),
            model_index: BTreeMap::new(),
            pipelines: Vec::new(),
            pipeline_index: BTreeMap::new(),
            workers: BTreeMap::new(),
            insts: BTreeMap::new(),
            queries: Vec::new(),
            events: BinaryHeap::new(),
            seq: 0,
            ingress_rng: ChaCha8Rng::seed_from_u64(seed),
            net_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            jitter: Jitter::new(config.latency_jitter, seed ^ 0x5851_f42d_4c95_7f2d),
            link_free: BTreeMap::new(),
            weights: BTreeMap::new(),
            exec_log: Vec::new(),
            batches: Vec::new(),
            sends: Vec::new(),
            log: Vec::new(),
            stats: RuntimeStats::default(),
            config,
        }
    }

    pub fn now(&self) -> Micros {
        self.clock.now_us()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn profiles(&self) -> &ProfileSet {
        &self.profiles
    }

    pub fn kvs(&self) -> &Kvs {
        &self.kvs
    }

    pub fn kvs_mut(&mut self) -> &mut Kvs {
        &mut self.kvs
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn query(&self, id: QueryId) -> Option<&QueryRecord> {
        self.queries.get(id as usize)
    }

    pub fn exec_log(&self) -> &[ExecRow] {
        &self.exec_log
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn sends(&self) -> &[SendRecord] {
        &self.sends
    }

    pub fn events(&self) -> &[RuntimeEvent] {
        &self.log
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats
    }

    pub fn pipeline(&self, name: &str) -> Option<&PipelineGraph> {
        self.pipeline_index.get(name).map(|i| &self.pipelines[*i].graph)
    }

    pub fn in_flight(&self, pipeline: &str) -> Option<usize> {
        self.pipeline_index.get(pipeline).map(|i| self.pipelines[*i].in_flight)
    }

    fn schedule(&mut self, t: Micros, ev: Ev) {
        self.seq += 1;
        self.events.push(Scheduled { t, seq: self.seq, ev });
    }

    pub fn next_event_time(&self) -> Option<Micros> {
        self.events.peek().map(|s| s.t)
    }

    /// Registers the implementation of a model; returns the handler id the store fires.
    pub fn register_component(&mut self, model_id: &str, component: Arc<dyn Component>) -> Result<HandlerId> {
        if self.components.contains_key(model_id) {
            return Err(RuntimeError::AlreadyRegistered(model_id.to_string()));
        }
        let id = HandlerId(self.next_handler);
        self.next_handler += 1;
        self.kvs.add_handler(
            id,
            Arc::new(TriggerAdapter {
                component: component.clone(),
                mailbox: self.mailbox.clone(),
            }),
        );
        self.components.insert(model_id.to_string(), (id, component));
        Ok(id)
    }

    fn component(&self, model: &str) -> Arc<dyn Component> {
        self.components.get(model).map(|(_, c)| c.clone()).unwrap_or_else(|| Arc::new(Echo))
    }

    /// Partitions nodes and installs replicas as the placement says. Models
    /// already resident are left alone.
    pub fn deploy(&mut self, placement: &Placement) -> Result<()> {
        for nl in &placement.layouts {
            let Some(layout) = &nl.layout else { continue };
            if self.cluster.node(nl.node)?.layout.as_ref() != Some(layout) {
                self.cluster.partition_node(nl.node, layout)?;
            }
        }
        for a in &placement.assignments {
            let id = InstanceId { node: a.node, slot: a.slot };
            let size = self.cluster.instance(id)?.size;
            let mem = self
                .profiles
                .get(&a.model)?
                .memory_gb(size)
                .ok_or_else(|| ExecError::NoProfile(a.model.clone(), size))?;
            let inst = self.cluster.instance_mut(id)?;
            if !inst.hosts(&a.model) {
                inst.install(&a.model, mem)?;
            }
        }
        Ok(())
    }

    fn serving(&self, id: InstanceId, model: &str) -> bool {
        if self.insts.get(&id).is_some_and(|r| r.failed) {
            return false;
        }
        self.cluster
            .instance(id)
            .is_ok_and(|i| matches!(i.state(), InstanceState::Active | InstanceState::Draining) && i.hosts(model))
    }

    fn ensure_model(&mut self, name: &str, stage: &str, max_batch: u32) -> Result<usize> {
        if let Some(&m) = self.model_index.get(name) {
            let rt = &mut self.models[m];
            rt.max_batch = rt.max_batch.min(max_batch);
            return Ok(m);
        }
        let mut pool: Vec<InstanceId> = self
            .cluster
            .instances()
            .filter(|i| i.state() == InstanceState::Active && i.hosts(name))
            .map(|i| i.id)
            .collect();
        if pool.is_empty() && self.is_host_model(name) {
            let hosts: Vec<InstanceId> = self
                .cluster
                .instances()
                .filter(|i| i.size == InstanceSize::Host && i.state() != InstanceState::Draining)
                .map(|i| i.id)
                .collect();
            for h in hosts {
                self.cluster.instance_mut(h)?.install(name, 0.0)?;
                pool.push(h);
            }
        }
        if pool.is_empty() {
            return Err(RuntimeError::Unschedulable {
                stage: stage.to_string(),
                model: name.to_string(),
            });
        }
        let prefix = format!("{MODEL_PREFIX}/{name}");
        let members = vec![pool.iter().map(|i| kvs_node(*i)).collect()];
        let kpool = self.kvs.create_pool_with_members(&prefix, members)?;
        let handler = match self.components.get(name) {
            Some((h, _)) => *h,
            None => {
                let h = HandlerId(self.next_handler);
                self.next_handler += 1;
                self.kvs.add_handler(
                    h,
                    Arc::new(TriggerAdapter {
                        component: Arc::new(Echo),
                        mailbox: self.mailbox.clone(),
                    }),
                );
                h
            }
        };
        self.kvs.register_trigger(&prefix, handler)?;
        let m = self.models.len();
        self.models.push(ModelRt {
            name: name.to_string(),
            pool,
            shard: kpool.shards[0],
            max_batch,
            arrivals: 0,
            groups: Vec::new(),
        });
        self.model_index.insert(name.to_string(), m);
        Ok(m)
    }

    fn is_host_model(&self, name: &str) -> bool {
        self.profiles
            .get(name)
            .is_ok_and(|p| p.sizes().iter().all(|s| *s == InstanceSize::Host))
    }

    /// Stores a stage's dependencies as one affinity group and caches it on
    /// every instance of the pool.
    fn install_deps(&mut self, pipeline: &str, stage: &StageSpec, model: usize) -> Result<()> {
        if stage.deps.is_empty() {
            return Ok(());
        }
        let keys: Vec<Key> = stage.deps.iter().map(Key::new).collect::<Result<_, _>>()?;
        let group = format!("{pipeline}:{}", stage.id);
        if self.kvs.group_members(&group).is_none() {
            for k in &keys {
                if self.kvs.shard_of(k).is_err() {
                    let top = format!("/{}", k.as_str().trim_start_matches('/').split('/').next().unwrap_or_default());
                    let members = vec![self.cluster.instances().map(|i| kvs_node(i.id)).collect()];
                    self.kvs.create_pool_with_members(&top, members)?;
                }
            }
            self.kvs.create_affinity_group(&group, &keys)?;
            for k in &keys {
                self.kvs.put(k, Bytes::from(format!("synthetic object {k}")))?;
            }
        }
        let nodes: Vec<NodeId> = self.models[model].pool.iter().map(|i| kvs_node(*i)).collect();
        for n in nodes {
            self.kvs.fetch_group(&group, n)?;
        }
        self.models[model].groups.push(group);
        Ok(())
    }

    /// Deploys `placement` and makes `spec` available for ingress.
    pub fn load_pipeline(&mut self, spec: &PipelineSpec, placement: &Placement) -> Result<()> {
        let graph = spec.validate()?;
        if self.pipeline_index.contains_key(&spec.name) {
            return Err(RuntimeError::PipelineExists(spec.name.clone()));
        }
        self.deploy(placement)?;
        for s in &spec.stages {
            let known = self.model_index.contains_key(&s.model);
            let hosted = self
                .cluster
                .instances()
                .any(|i| i.state() == InstanceState::Active && i.hosts(&s.model));
            if !known && !hosted && !(self.is_host_model(&s.model) && self.cluster.instances().any(|i| i.size == InstanceSize::Host)) {
                return Err(RuntimeError::Unschedulable {
                    stage: s.id.clone(),
                    model: s.model.clone(),
                });
            }
        }
        let mut models = Vec::with_capacity(spec.stages.len());
        for s in &spec.stages {
            let m = self.ensure_model(&s.model, &s.id, s.max_batch)?;
            self.install_deps(&spec.name, s, m)?;
            models.push(m);
        }
        let joins = (0..spec.stages.len())
            .map(|i| {
                graph.is_incast(i).then(|| {
                    JoinBuffer::new(
                        spec.stages[i].id.clone(),
                        graph.incast[i].iter().map(|u| spec.stages[*u].id.clone()).collect(),
                    )
                })
            })
            .collect();
        self.pipeline_index.insert(spec.name.clone(), self.pipelines.len());
        self.pipelines.push(PipelineRt {
            graph,
            models,
            joins,
            draining: false,
            in_flight: 0,
        });
        Ok(())
    }

    fn net_delay(&mut self, from: Option<InstanceId>, to_node: u32) -> Micros {
        match from {
            Some(f) if f.node == to_node => self.config.local_hop_us,
            _ => {
                let j = if self.config.net_jitter_us > 0 {
                    self.net_rng.random_range(0..=self.config.net_jitter_us)
                } else {
                    0
                };
                self.config.remote_hop_us + j
            }
        }
    }

    /// Arrival time of a send on a FIFO link.
    fn link_arrival(&mut self, from: Option<InstanceId>, to_node: u32) -> Micros {
        let at = self.now() + self.net_delay(from, to_node);
        let slot = self.link_free.entry((from.map(|f| f.node), to_node)).or_insert(0);
        *slot = (*slot).max(at);
        *slot
    }

    /// Power of two choices over last-reported queue depths; ties keep the first draw.
    fn pick(&mut self, model: usize) -> Option<(InstanceId, usize)> {
        let pool_len = self.models[model].pool.len();
        match pool_len {
            0 => None,
            1 => Some((self.models[model].pool[0], 0)),
            n => {
                let a = self.ingress_rng.random_range(0..n);
                let mut b = self.ingress_rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                let depth = |i: usize| {
                    let id = self.models[model].pool[i];
                    self.workers.get(&(id, model)).map_or(0, |w| w.reported_depth)
                };
                let choice = if depth(b) < depth(a) { b } else { a };
                Some((self.models[model].pool[choice], choice))
            }
        }
    }

    /// Admits a query at the current time and fixes its routing tags.
    pub fn ingress_submit(&mut self, pipeline: &str, payload: impl Into<Bytes>) -> Result<QueryId> {
        let p = *self
            .pipeline_index
            .get(pipeline)
            .ok_or_else(|| RuntimeError::NoSuchPipeline(pipeline.to_string()))?;
        if self.pipelines[p].draining {
            return Err(RuntimeError::Draining(pipeline.to_string()));
        }
        let topo = self.pipelines[p].graph.topo.clone();
        for &s in &topo {
            let m = self.pipelines[p].models[s];
            if self.models[m].pool.is_empty() {
                return Err(RuntimeError::NoWorker(self.pipelines[p].graph.stage(s).id.clone()));
            }
        }
        let mut tags = BTreeMap::new();
        let mut tag_slots = BTreeMap::new();
        for &s in &topo {
            let m = self.pipelines[p].models[s];
            let (inst, slot) = self.pick(m).expect("pool checked non-empty");
            let stage = self.pipelines[p].graph.stage(s).id.clone();
            self.workers.entry((inst, m)).or_default().outstanding += 1;
            tags.insert(stage.clone(), inst);
            tag_slots.insert(stage, slot);
        }
        let mut seen = BTreeSet::new();
        for &s in &topo {
            let m = self.pipelines[p].models[s];
            if seen.insert(m) {
                self.models[m].arrivals += 1;
            }
        }
        let id = self.queries.len() as QueryId;
        let payload = payload.into();
        let now = self.now();
        self.queries.push(QueryRecord {
            id,
            pipeline: pipeline.to_string(),
            payload: payload.clone(),
            tags,
            tag_slots,
            reroutes: BTreeMap::new(),
            ingress_us: now,
            egress_us: None,
            stages: BTreeMap::new(),
            deliveries: Vec::new(),
            status: QueryStatus::InFlight,
            result: None,
            pipeline_idx: p,
            open: topo.iter().copied().collect(),
        });
        self.stats.submitted += 1;
        self.stats.in_flight += 1;
        self.pipelines[p].in_flight += 1;

        let ingress = self.pipelines[p].graph.ingress.clone();
        let mut by_node: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for s in ingress {
            let stage_id = &self.pipelines[p].graph.stage(s).id;
            let dest = self.queries[id as usize].tags[stage_id];
            by_node.entry(dest.node).or_default().push(s);
        }
        for (node, stages) in by_node {
            let at = self.link_arrival(None, node);
            self.sends.push(SendRecord {
                ts: now,
                from: None,
                to_node: node,
                count: stages.len(),
            });
            for s in stages {
                self.schedule(
                    at,
                    Ev::Deliver {
                        query: id,
                        stage: s,
                        from: None,
                        payload: payload.clone(),
                    },
                );
            }
        }
        Ok(id)
    }

    /// Processes the next event, if any.
    pub fn step(&mut self) -> bool {
        let Some(s) = self.events.pop() else { return false };
        self.clock.set(s.t);
        match s.ev {
            Ev::Deliver { query, stage, from, payload } => self.on_deliver(query, stage, from, payload),
            Ev::BatchDone(inst) => self.on_batch_done(inst),
            Ev::LoadDone(inst) => self.on_load_done(inst),
            Ev::JoinCheck { pipeline, stage, query } => self.on_join_check(pipeline, stage, query),
        }
        true
    }

    /// Runs every event due at or before `t`, then moves the clock to `t`.
    pub fn advance_to(&mut self, t: Micros) {
        while self.next_event_time().is_some_and(|n| n <= t) {
            self.step();
        }
        self.clock.set(t);
    }

    /// Runs until no events remain.
    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    fn stage_name(&self, p: usize, s: usize) -> String {
        self.pipelines[p].graph.stage(s).id.clone()
    }

    fn fail_query(&mut self, q: QueryId, reason: String) {
        let now = self.now();
        let rec = &mut self.queries[q as usize];
        if rec.status != QueryStatus::InFlight {
            return;
        }
        rec.status = QueryStatus::Failed(reason.clone());
        let p = rec.pipeline_idx;
        let open: Vec<usize> = std::mem::take(&mut rec.open).into_iter().collect();
        for s in open {
            let stage = self.stage_name(p, s);
            let m = self.pipelines[p].models[s];
            if let Some(dest) = self.queries[q as usize].destination(&stage) {
                if let Some(w) = self.workers.get_mut(&(dest, m)) {
                    w.outstanding = w.outstanding.saturating_sub(1);
                }
                self.check_drain(dest);
            }
            if let Some(j) = self.pipelines[p].joins[s].as_mut() {
                j.discard(q);
            }
        }
        self.stats.failed += 1;
        self.stats.in_flight -= 1;
        self.pipelines[p].in_flight -= 1;
        self.log.push(RuntimeEvent::QueryFailed { ts: now, query: q, reason });
    }

    /// The tagged instance, or a live stand-in when it no longer serves the stage.
    fn resolve(&mut self, q: QueryId, p: usize, s: usize) -> Option<InstanceId> {
        let stage = self.stage_name(p, s);
        let m = self.pipelines[p].models[s];
        let current = self.queries[q as usize].destination(&stage)?;
        if self.serving(current, &self.models[m].name) {
            return Some(current);
        }
        let pool = &self.models[m].pool;
        if pool.is_empty() {
            return None;
        }
        let slot = self.queries[q as usize].tag_slots[&stage];
        let used = pool[slot % pool.len()];
        let tagged = self.queries[q as usize].tags[&stage];
        self.queries[q as usize].reroutes.insert(stage.clone(), used);
        if let Some(w) = self.workers.get_mut(&(current, m)) {
            w.outstanding = w.outstanding.saturating_sub(1);
        }
        self.workers.entry((used, m)).or_default().outstanding += 1;
        let now = self.now();
        self.log.push(RuntimeEvent::TagViolation {
            ts: now,
            query: q,
            stage,
            tagged,
            used,
        });
        Some(used)
    }

    fn on_deliver(&mut self, q: QueryId, s: usize, from: Option<usize>, payload: Bytes) {
        if self.queries[q as usize].status != QueryStatus::InFlight {
            return;
        }
        let p = self.queries[q as usize].pipeline_idx;
        let stage = self.stage_name(p, s);
        let m = self.pipelines[p].models[s];
        let Some(dest) = self.resolve(q, p, s) else {
            self.fail_query(q, format!("no active instance for stage {stage}"));
            return;
        };
        let from_name = from.map(|f| self.stage_name(p, f));
        let key = Key::new(format!(
            "{MODEL_PREFIX}/{}/{}/{q}/{stage}/{}",
            self.models[m].name,
            self.pipelines[p].graph.spec.name,
            from_name.as_deref().unwrap_or("ingress")
        ))
        .expect("well-formed key");
        let persist = from.is_some_and(|f| self.pipelines[p].graph.successors[f].iter().any(|(t, per)| *t == s && *per));
        let dest = if persist {
            self.kvs.put(&key, payload.clone()).map(|_| dest)
        } else {
            self.kvs
                .trigger_put_routed(&key, payload.clone(), kvs_node(dest))
                .map(|ack| from_kvs_node(ack.delivered_to))
        };
        self.mailbox.lock().expect("mailbox").clear();
        let dest = match dest {
            Ok(d) => d,
            Err(e) => {
                self.fail_query(q, format!("handoff to {stage} failed: {e}"));
                return;
            }
        };
        let ts = self.now();
        self.queries[q as usize].deliveries.push(Delivery {
            ts,
            stage: stage.clone(),
            from: from_name.clone(),
            instance: dest,
        });

        let now = self.now();
        let inputs = match self.pipelines[p].joins[s].as_mut() {
            Some(join) => {
                let first = !join.is_pending(q);
                let upstream = from_name.clone().unwrap_or_default();
                match join.arrive(q, &upstream, payload, now) {
                    Ok(Some(inputs)) => inputs,
                    Ok(None) => {
                        if first {
                            let t = now + ms_to_us(self.config.incast_timeout_ms);
                            self.schedule(t, Ev::JoinCheck { pipeline: p, stage: s, query: q });
                        }
                        return;
                    }
                    Err(_) => {
                        self.log.push(RuntimeEvent::DuplicateInput {
                            ts: now,
                            query: q,
                            stage,
                            upstream,
                        });
                        return;
                    }
                }
            }
            None => vec![payload],
        };
        self.enqueue(q, p, s, dest, key, inputs);
    }

    fn enqueue(&mut self, q: QueryId, p: usize, s: usize, dest: InstanceId, key: Key, inputs: Vec<Bytes>) {
        let now = self.now();
        let m = self.pipelines[p].models[s];
        let cap = self.pipelines[p].graph.stage(s).max_batch as usize;
        let stage = self.stage_name(p, s);
        self.queries[q as usize].stages.insert(
            stage,
            StageTimes {
                instance: dest,
                enqueue_us: now,
                ..StageTimes::default()
            },
        );
        self.workers.entry((dest, m)).or_default().queue.push_back(Pending {
            query: q,
            pipeline: p,
            stage: s,
            enqueue: now,
            cap,
            key,
            inputs,
        });
        self.try_dispatch(dest);
    }

    fn activity_weight(&mut self, model: &str, size: InstanceSize) -> f64 {
        if let Some(w) = self.weights.get(&(model.to_string(), size)) {
            return *w;
        }
        let w = match (self.profiles.get(model), size.gb()) {
            (Ok(p), Some(gb)) => {
                let per_gb = |s: InstanceSize| p.peak_throughput(s, None).zip(s.gb()).map(|(t, g)| t / f64::from(g));
                let here = per_gb(InstanceSize::Gb(gb));
                let best = p
                    .sizes()
                    .into_iter()
                    .filter(|s| s.gb().is_some() && p.fits(*s))
                    .filter_map(per_gb)
                    .reduce(f64::max);
                match (here, best) {
                    (Some(h), Some(b)) if b > 0.0 => (h / b).clamp(0.0, 1.0),
                    _ => 1.0,
                }
            }
            _ => 1.0,
        };
        self.weights.insert((model.to_string(), size), w);
        w
    }

    fn try_dispatch(&mut self, inst: InstanceId) {
        let rt = self.insts.entry(inst).or_default();
        if rt.running.is_some() || rt.wedged || rt.failed {
            return;
        }
        let Ok(instance) = self.cluster.instance(inst) else { return };
        if !matches!(instance.state(), InstanceState::Active | InstanceState::Draining) {
            return;
        }
        let now = self.now();
        // Drop entries of queries that failed while queued.
        let queries = &self.queries;
        let mut best: Option<(Micros, usize)> = None;
        for ((_, m), w) in self.workers.range_mut((inst, 0)..=(inst, usize::MAX)) {
            w.queue.retain(|e| queries[e.query as usize].status == QueryStatus::InFlight);
            if let Some(head) = w.queue.front() {
                if best.is_none_or(|(t, _)| head.enqueue < t) {
                    best = Some((head.enqueue, *m));
                }
            }
        }
        let Some((_, m)) = best else {
            self.check_drain(inst);
            return;
        };
        let model = self.models[m].name.clone();
        let ready_at = instance.ready_at(&model).unwrap_or(Micros::MAX);
        if ready_at > now {
            let rt = self.insts.get_mut(&inst).expect("entry created above");
            if !rt.wake_scheduled && ready_at != Micros::MAX {
                rt.wake_scheduled = true;
                self.schedule(ready_at, Ev::LoadDone(inst));
            }
            return;
        }
        let size = instance.size;
        let members = form_batch(&mut self.workers.get_mut(&(inst, m)).expect("worker").queue, |e| e.cap).expect("queue non-empty");
        let b = members.len() as u32;
        let latency_ms = self.profiles.latency_ms(&model, size, b).unwrap_or(1.0) * self.jitter.factor();
        let weight = self.activity_weight(&model, size);
        let timing = match self.cluster.instance_mut(inst).and_then(|i| i.execute(&model, now, ms_to_us(latency_ms), weight)) {
            Ok(t) => t,
            Err(e) => {
                for e2 in &members {
                    self.fail_query(e2.query, format!("execution failed: {e}"));
                }
                return;
            }
        };
        for e in &members {
            let stage = self.stage_name(e.pipeline, e.stage);
            if let Some(st) = self.queries[e.query as usize].stages.get_mut(&stage) {
                st.dispatch_us = now;
                st.batch_size = members.len();
            }
        }
        self.batches.push(Batch {
            instance: inst,
            model: model.clone(),
            members: members.iter().map(|e| (e.query, self.stage_name(e.pipeline, e.stage))).collect(),
            formed_ts: now,
        });
        self.insts.get_mut(&inst).expect("entry").running = Some((m, members));
        self.schedule(timing.end, Ev::BatchDone(inst));
    }

    fn on_batch_done(&mut self, inst: InstanceId) {
        let rt = self.insts.entry(inst).or_default();
        if rt.failed {
            return;
        }
        let Some((m, members)) = rt.running.take() else { return };
        let now = self.now();
        let model = self.models[m].name.clone();
        let component = self.component(&model);
        let mut outgoing: BTreeMap<u32, Vec<(QueryId, usize, usize, Bytes)>> = BTreeMap::new();
        for e in members {
            if let Some(w) = self.workers.get_mut(&(inst, m)) {
                w.outstanding = w.outstanding.saturating_sub(1);
            }
            if self.queries[e.query as usize].status != QueryStatus::InFlight {
                continue;
            }
            let out = component.process(&e.key, &e.inputs);
            let p = e.pipeline;
            let stage = self.stage_name(p, e.stage);
            let rec = &mut self.queries[e.query as usize];
            rec.open.remove(&e.stage);
            let st = rec.stages.get_mut(&stage).expect("stage enqueued");
            st.complete_us = now;
            st.emit_us = now;
            let st = *st;
            self.exec_log.push(ExecRow {
                query_id: e.query,
                stage,
                instance: inst,
                enqueue_us: st.enqueue_us,
                dispatch_us: st.dispatch_us,
                complete_us: st.complete_us,
                emit_us: st.emit_us,
                batch_size: st.batch_size,
            });
            if e.stage == self.pipelines[p].graph.egress {
                let rec = &mut self.queries[e.query as usize];
                rec.egress_us = Some(now);
                rec.result = Some(out);
                rec.status = QueryStatus::Completed;
                self.stats.completed += 1;
                self.stats.in_flight -= 1;
                self.pipelines[p].in_flight -= 1;
                continue;
            }
            for &(succ, _) in &self.pipelines[p].graph.successors[e.stage] {
                let succ_name = &self.pipelines[p].graph.stage(succ).id;
                let dest = self.queries[e.query as usize].destination(succ_name).expect("tagged at ingress");
                outgoing.entry(dest.node).or_default().push((e.query, succ, e.stage, out.clone()));
            }
        }
        let depth = self.workers.get(&(inst, m)).map_or(0, |w| w.queue.len());
        self.workers.entry((inst, m)).or_default().reported_depth = depth;
        for (node, items) in outgoing {
            let at = self.link_arrival(Some(inst), node);
            self.sends.push(SendRecord {
                ts: now,
                from: Some(inst),
                to_node: node,
                count: items.len(),
            });
            for (query, stage, from, payload) in items {
                self.schedule(
                    at,
                    Ev::Deliver {
                        query,
                        stage,
                        from: Some(from),
                        payload,
                    },
                );
            }
        }
        self.try_dispatch(inst);
    }

    fn on_load_done(&mut self, inst: InstanceId) {
        let now = self.now();
        self.insts.entry(inst).or_default().wake_scheduled = false;
        if let Ok(i) = self.cluster.instance_mut(inst) {
            let before = i.state();
            i.finish_loads(now);
            if before == InstanceState::Preloading && i.state() == InstanceState::Ready {
                self.log.push(RuntimeEvent::LoadComplete { ts: now, instance: inst });
            }
        }
        self.try_dispatch(inst);
    }

    fn on_join_check(&mut self, p: usize, s: usize, q: QueryId) {
        let now = self.now();
        let timeout = ms_to_us(self.config.incast_timeout_ms);
        let Some(join) = self.pipelines[p].joins[s].as_mut() else { return };
        if !join.is_pending(q) {
            return;
        }
        for expired in join.expire(now, timeout) {
            let stage = self.stage_name(p, s);
            self.log.push(RuntimeEvent::IncastTimeout {
                ts: now,
                query: expired,
                stage: stage.clone(),
            });
            self.fail_query(expired, format!("IncastTimeout at stage {stage}"));
        }
    }

    fn check_drain(&mut self, inst: InstanceId) {
        let Ok(i) = self.cluster.instance(inst) else { return };
        if i.state() != InstanceState::Draining {
            return;
        }
        if self.insts.get(&inst).is_some_and(|r| r.running.is_some()) {
            return;
        }
        let idle = self
            .workers
            .range((inst, 0)..=(inst, usize::MAX))
            .all(|(_, w)| w.queue.is_empty() && w.outstanding == 0);
        if !idle {
            return;
        }
        let models: Vec<String> = i.models().map(str::to_string).collect();
        if self.cluster.instance_mut(inst).and_then(|i| i.finish_drain()).is_err() {
            return;
        }
        for name in models {
            if let Some(&m) = self.model_index.get(&name) {
                let shard = self.models[m].shard;
                let _ = self.kvs.set_live(shard, kvs_node(inst), false);
                for g in self.models[m].groups.clone() {
                    self.kvs.evict_group(&g, kvs_node(inst));
                }
            }
        }
        let now = self.now();
        self.log.push(RuntimeEvent::Drained { ts: now, instance: inst });
    }

    fn join_pool(&mut self, inst: InstanceId) -> Result<()> {
        let models: Vec<String> = self.cluster.instance(inst)?.models().map(str::to_string).collect();
        for name in models {
            let Some(&m) = self.model_index.get(&name) else { continue };
            let pool = &mut self.models[m].pool;
            if let Err(pos) = pool.binary_search(&inst) {
                pool.insert(pos, inst);
            }
            let shard = self.models[m].shard;
            self.kvs.add_member(shard, kvs_node(inst))?;
            for g in self.models[m].groups.clone() {
                self.kvs.fetch_group(&g, kvs_node(inst))?;
            }
            let w = self.workers.entry((inst, m)).or_default();
            w.reported_depth = w.queue.len();
        }
        Ok(())
    }

    fn model_idx(&self, model: &str) -> Result<usize> {
        self.model_index
            .get(model)
            .copied()
            .ok_or_else(|| RuntimeError::NoSuchModel(model.to_string()))
    }

    /// Loads `model` on an out-of-service instance; it stays out of the pool until activated.
    pub fn preload(&mut self, inst: InstanceId, model: &str) -> Result<Micros> {
        let m = self.model_idx(model)?;
        let now = self.now();
        let size = self.cluster.instance(inst)?.size;
        let mem = self
            .profiles
            .get(model)?
            .memory_gb(size)
            .ok_or_else(|| ExecError::NoProfile(model.to_string(), size))?;
        let delay = self.config.load_delay_us(model);
        let ready = self.cluster.instance_mut(inst)?.load_model(model, mem, true, now, delay)?;
        for g in self.models[m].groups.clone() {
            self.kvs.fetch_group(&g, kvs_node(inst))?;
        }
        self.schedule(ready, Ev::LoadDone(inst));
        self.log.push(RuntimeEvent::Preloading {
            ts: now,
            instance: inst,
            model: model.to_string(),
        });
        Ok(ready)
    }

    /// Puts a Ready instance into its models' pools.
    pub fn activate(&mut self, inst: InstanceId) -> Result<()> {
        let now = self.now();
        self.cluster.instance_mut(inst)?.finish_loads(now);
        self.cluster.instance_mut(inst)?.activate()?;
        self.join_pool(inst)?;
        self.log.push(RuntimeEvent::Activated { ts: now, instance: inst });
        Ok(())
    }

    /// Adds an instance to the pool immediately while its model is still
    /// loading; batches routed to it wait for the load.
    pub fn cold_join(&mut self, inst: InstanceId, model: &str) -> Result<Micros> {
        self.model_idx(model)?;
        let now = self.now();
        let size = self.cluster.instance(inst)?.size;
        let mem = self
            .profiles
            .get(model)?
            .memory_gb(size)
            .ok_or_else(|| ExecError::NoProfile(model.to_string(), size))?;
        let delay = self.config.load_delay_us(model);
        let ready = self.cluster.instance_mut(inst)?.load_model(model, mem, false, now, delay)?;
        self.join_pool(inst)?;
        self.log.push(RuntimeEvent::ColdJoin {
            ts: now,
            instance: inst,
            model: model.to_string(),
        });
        Ok(ready)
    }

    /// Removes an instance from every pool; it finishes the work already
    /// tagged for it and then unloads.
    pub fn deactivate(&mut self, inst: InstanceId) -> Result<()> {
        self.cluster.instance_mut(inst)?.start_drain()?;
        for m in &mut self.models {
            m.pool.retain(|i| *i != inst);
        }
        let now = self.now();
        self.log.push(RuntimeEvent::Draining { ts: now, instance: inst });
        self.check_drain(inst);
        Ok(())
    }

    /// Test hook: the instance stops without completing its current batch.
    /// Its queued work moves to stand-in instances.
    pub fn fail_instance(&mut self, inst: InstanceId) -> Result<()> {
        self.cluster.instance(inst)?;
        let rt = self.insts.entry(inst).or_default();
        rt.failed = true;
        let running = rt.running.take();
        let now = self.now();
        self.log.push(RuntimeEvent::InstanceFailed { ts: now, instance: inst });
        let mut orphans: Vec<Pending> = running.map(|(_, v)| v).unwrap_or_default();
        let keys: Vec<(InstanceId, usize)> = self.workers.range((inst, 0)..=(inst, usize::MAX)).map(|(k, _)| *k).collect();
        for k in keys {
            let w = self.workers.get_mut(&k).expect("key listed");
            orphans.extend(w.queue.drain(..));
            let m = k.1;
            let shard = self.models[m].shard;
            let _ = self.kvs.set_live(shard, kvs_node(inst), false);
        }
        for m in &mut self.models {
            m.pool.retain(|i| *i != inst);
        }
        orphans.sort_by_key(|e| (e.enqueue, e.query));
        for e in orphans {
            if self.queries[e.query as usize].status != QueryStatus::InFlight {
                continue;
            }
            match self.resolve(e.query, e.pipeline, e.stage) {
                Some(dest) => self.enqueue(e.query, e.pipeline, e.stage, dest, e.key, e.inputs),
                None => self.fail_query(e.query, "no active instance after failure".into()),
            }
        }
        Ok(())
    }

    /// Test hook: a wedged instance never starts another batch.
    pub fn set_wedged(&mut self, inst: InstanceId, wedged: bool) {
        self.insts.entry(inst).or_default().wedged = wedged;
        if !wedged {
            self.try_dispatch(inst);
        }
    }

    /// Blocks new ingress and runs until every in-flight query of the
    /// pipeline finishes. Returns how many were in flight.
    pub fn drain(&mut self, pipeline: &str, timeout_us: Micros) -> Result<usize> {
        let p = *self
            .pipeline_index
            .get(pipeline)
            .ok_or_else(|| RuntimeError::NoSuchPipeline(pipeline.to_string()))?;
        self.pipelines[p].draining = true;
        let n = self.pipelines[p].in_flight;
        let deadline = self.now() + timeout_us;
        while self.pipelines[p].in_flight > 0 {
            match self.next_event_time() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => {
                    self.clock.set(deadline);
                    return Err(RuntimeError::DrainTimeout(self.pipelines[p].in_flight));
                }
            }
        }
        Ok(n)
    }

    /// Re-opens ingress after a drain.
    pub fn resume(&mut self, pipeline: &str) -> Result<()> {
        let p = *self
            .pipeline_index
            .get(pipeline)
            .ok_or_else(|| RuntimeError::NoSuchPipeline(pipeline.to_string()))?;
        self.pipelines[p].draining = false;
        Ok(())
    }

    pub fn pool(&self, model: &str) -> Vec<InstanceId> {
        self.model_index.get(model).map(|m| self.models[*m].pool.clone()).unwrap_or_default()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    pub fn model_max_batch(&self, model: &str) -> Option<u32> {
        self.model_index.get(model).map(|m| self.models[*m].max_batch)
    }

    /// Profiled peak throughput of one replica of `model` on `inst`.
    pub fn replica_qps(&self, model: &str, inst: InstanceId) -> f64 {
        let cap = self.model_max_batch(model);
        self.cluster
            .instance(inst)
            .ok()
            .and_then(|i| self.profiles.get(model).ok()?.peak_throughput(i.size, cap))
            .unwrap_or(0.0)
    }

    /// Sum of replica throughput over the active pool.
    pub fn capacity_qps(&self, model: &str) -> f64 {
        self.pool(model).into_iter().map(|i| self.replica_qps(model, i)).sum()
    }

    /// Arrivals admitted for `model` since the previous call.
    pub fn take_arrivals(&mut self, model: &str) -> u64 {
        self.model_index
            .get(model)
            .map(|m| std::mem::take(&mut self.models[*m].arrivals))
            .unwrap_or(0)
    }

    /// Whether `inst` already caches the dependency groups of `model`.
    pub fn has_deps(&self, inst: InstanceId, model: &str) -> bool {
        let Some(&m) = self.model_index.get(model) else { return false };
        let cached = self.kvs.cached_keys(kvs_node(inst));
        self.models[m].groups.iter().all(|g| {
            self.kvs
                .group_members(g)
                .is_some_and(|members| members.iter().all(|k| cached.contains(k)))
        })
    }

    pub fn queue_len(&self, inst: InstanceId, model: &str) -> usize {
        self.model_index
            .get(model)
            .and_then(|m| self.workers.get(&(inst, *m)))
            .map_or(0, |w| w.queue.len())
    }

    /// CSV columns: query_id, stage, instance, enqueue_us, dispatch_us, complete_us, emit_us, batch_size.
    pub fn write_exec_log_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query_id", "stage", "instance", "enqueue_us", "dispatch_us", "complete_us", "emit_us", "batch_size"])?;
        for r in &self.exec_log {
            w.write_record([
                r.query_id.to_string(),
                r.stage.clone(),
                r.instance.to_string(),
                r.enqueue_us.to_string(),
                r.dispatch_us.to_string(),
                r.complete_us.to_string(),
                r.emit_us.to_string(),
                r.batch_size.to_string(),
            ])?;
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests;
