//! Load tracking and pool resizing.
//!
//! Each component's arrival rate is smoothed with a half-life EWMA and
//! compared against the profiled capacity of its active pool. Rising load
//! first preloads models on standby instances (out of service), then
//! activates them once load crosses the activation threshold; sustained low
//! load drains replicas one at a time.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clock::{ms_to_us, Micros};
use crate::executor::{InstanceId, InstanceState};
use crate::runtime::{Runtime, RuntimeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub preload: f64,
    pub activate: f64,
    pub scale_down: f64,
    /// Projected utilization that preload and activation aim for.
    pub target: f64,
    pub hold_ms: f64,
    pub half_life_ms: f64,
    pub min_replicas: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            preload: 0.7,
            activate: 0.9,
            scale_down: 0.3,
            target: 0.8,
            hold_ms: 10_000.0,
            half_life_ms: 2_000.0,
            min_replicas: 1,
        }
    }
}

/// Half-life exponentially weighted rate.
#[derive(Debug, Clone)]
pub struct Ewma {
    half_life_us: f64,
    value: f64,
    last: Option<Micros>,
}

impl Ewma {
    pub fn new(half_life_us: Micros) -> Self {
        Self {
            half_life_us: half_life_us.max(1) as f64,
            value: 0.0,
            last: None,
        }
    }

    /// Folds in `arrivals` counted since the previous observation.
    pub fn observe(&mut self, arrivals: u64, now: Micros) -> f64 {
        match self.last {
            Some(last) if now > last => {
                let dt = (now - last) as f64;
                let rate = arrivals as f64 * 1e6 / dt;
                let alpha = 1.0 - (-dt / self.half_life_us).exp2();
                self.value += alpha * (rate - self.value);
                self.last = Some(now);
            }
            Some(_) => {}
            None => self.last = Some(now),
        }
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadEstimate {
    pub component: String,
    pub ewma_qps: f64,
    pub capacity_qps: f64,
    pub utilization: f64,
}

impl LoadEstimate {
    pub fn new(component: &str, ewma_qps: f64, capacity_qps: f64) -> Self {
        let capacity_qps = capacity_qps.max(0.0);
        let utilization = if capacity_qps > 0.0 {
            ewma_qps / capacity_qps
        } else if ewma_qps > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Self {
            component: component.to_string(),
            ewma_qps,
            capacity_qps,
            utilization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Preload,
    Activate,
    Deactivate,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionKind::Preload => "Preload",
            ActionKind::Activate => "Activate",
            ActionKind::Deactivate => "Deactivate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResizeAction {
    pub kind: ActionKind,
    pub component: String,
    pub instance: InstanceId,
    pub issued_ts: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ControlEvent {
    Action(ResizeAction),
    CapacityAlert { ts: Micros, component: String, missing_qps: f64 },
}

/// A candidate instance with the throughput one replica would add.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub instance: InstanceId,
    pub qps: f64,
    pub has_deps: bool,
}

/// What the controller knows about one component's instances.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PoolView {
    pub active: Vec<Candidate>,
    pub preloading: Vec<Candidate>,
    pub ready: Vec<Candidate>,
    pub standby: Vec<Candidate>,
}

impl PoolView {
    pub fn capacity(&self) -> f64 {
        self.active.iter().map(|c| c.qps).sum()
    }

    /// Orders standby candidates: those already caching dependencies first, then by node.
    pub fn sort_standby(&mut self) {
        self.standby.sort_by_key(|c| (!c.has_deps, c.instance));
    }
}

/// Builds the view of `model` from runtime state. Standby instances are
/// empty slices the model has a profile for and fits on, restricted to
/// `allowed` when given.
pub fn pool_view(rt: &Runtime, model: &str, allowed: Option<&[InstanceId]>) -> PoolView {
    let profile = rt.profiles().get(model).ok();
    let cand = |id: InstanceId| Candidate {
        instance: id,
        qps: rt.replica_qps(model, id),
        has_deps: rt.has_deps(id, model),
    };
    let mut view = PoolView {
        active: rt.pool(model).into_iter().map(cand).collect(),
        ..PoolView::default()
    };
    for inst in rt.cluster().instances() {
        let id = inst.id;
        match inst.state() {
            InstanceState::Preloading if inst.hosts(model) => view.preloading.push(cand(id)),
            InstanceState::Ready if inst.hosts(model) => view.ready.push(cand(id)),
            InstanceState::Empty => {
                let usable = profile.is_some_and(|p| p.fits(inst.size)) && allowed.is_none_or(|a| a.contains(&id));
                if usable {
                    view.standby.push(cand(id));
                }
            }
            _ => {}
        }
    }
    view.sort_standby();
    view
}

/// One row of the action log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionLogRow {
    pub ts_us: Micros,
    pub kind: ActionKind,
    pub component: String,
    pub node: u32,
    pub instance: InstanceId,
    pub pool_size_after: usize,
}

#[derive(Debug)]
pub struct Controller {
    pub thresholds: Thresholds,
    estimators: BTreeMap<String, Ewma>,
    low_since: BTreeMap<String, Micros>,
    activated_at: BTreeMap<InstanceId, Micros>,
    standby: Option<Vec<InstanceId>>,
    log: Vec<ActionLogRow>,
    events: Vec<ControlEvent>,
}

impl Controller {
    pub fn new(thresholds: Thresholds) -> Self {
        Self {
            thresholds,
            estimators: BTreeMap::new(),
            low_since: BTreeMap::new(),
            activated_at: BTreeMap::new(),
            standby: None,
            log: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Restricts preloading to these instances.
    pub fn with_standby(mut self, standby: Vec<InstanceId>) -> Self {
        self.standby = Some(standby);
        self
    }

    pub fn action_log(&self) -> &[ActionLogRow] {
        &self.log
    }

    /// Every decision made so far, alerts included.
    pub fn events(&self) -> &[ControlEvent] {
        &self.events
    }

    pub fn observe(&mut self, component: &str, arrivals: u64, now: Micros, capacity_qps: f64) -> LoadEstimate {
        let h = ms_to_us(self.thresholds.half_life_ms);
        let ewma = self.estimators.entry(component.to_string()).or_insert_with(|| Ewma::new(h)).observe(arrivals, now);
        LoadEstimate::new(component, ewma, capacity_qps)
    }

    /// Resize decisions for the given estimates. Pure apart from the
    /// controller's own timers.
    pub fn decide(&mut self, estimates: &[LoadEstimate], views: &BTreeMap<String, PoolView>, now: Micros) -> Vec<ControlEvent> {
        let th = self.thresholds.clone();
        let hold = ms_to_us(th.hold_ms);
        let mut out = Vec::new();
        for est in estimates {
            let Some(view) = views.get(&est.component) else { continue };
            let act = |kind, c: &Candidate| {
                ControlEvent::Action(ResizeAction {
                    kind,
                    component: est.component.clone(),
                    instance: c.instance,
                    issued_ts: now,
                })
            };
            let util = est.utilization;
            let needed = est.ewma_qps / th.target;

            if util > th.preload {
                let pending: f64 = view.preloading.iter().chain(&view.ready).map(|c| c.qps).sum();
                let mut deficit = needed - est.capacity_qps - pending;
                if deficit > 0.0 {
                    for c in view.standby.iter().filter(|c| c.qps > 0.0) {
                        if deficit <= 0.0 {
                            break;
                        }
                        out.push(act(ActionKind::Preload, c));
                        deficit -= c.qps;
                    }
                    if deficit > 0.0 {
                        out.push(ControlEvent::CapacityAlert {
                            ts: now,
                            component: est.component.clone(),
                            missing_qps: deficit,
                        });
                    }
                }
            }

            if util > th.activate {
                let mut cap = est.capacity_qps;
                for c in &view.ready {
                    if cap >= needed {
                        break;
                    }
                    out.push(act(ActionKind::Activate, c));
                    self.activated_at.insert(c.instance, now);
                    cap += c.qps;
                }
            }

            if util < th.scale_down {
                let since = *self.low_since.entry(est.component.clone()).or_insert(now);
                if now - since >= hold && view.active.len() > th.min_replicas.max(1) {
                    let victim = view.active.iter().max_by_key(|c| c.instance).expect("non-empty");
                    let after = est.capacity_qps - victim.qps;
                    let projected_ok = after > 0.0 && est.ewma_qps / after <= th.target;
                    let recent = self.activated_at.get(&victim.instance).is_some_and(|t| now - *t < hold);
                    if projected_ok && !recent {
                        out.push(act(ActionKind::Deactivate, victim));
                        self.low_since.insert(est.component.clone(), now);
                    }
                }
            } else {
                self.low_since.remove(&est.component);
            }
        }
        self.events.extend(out.iter().cloned());
        out
    }

    /// Carries out one action on the runtime and logs it.
    pub fn apply(&mut self, rt: &mut Runtime, action: &ResizeAction) -> Result<(), RuntimeError> {
        match action.kind {
            ActionKind::Preload => rt.preload(action.instance, &action.component).map(|_| ())?,
            ActionKind::Activate => {
                rt.activate(action.instance)?;
                self.activated_at.insert(action.instance, rt.now());
            }
            ActionKind::Deactivate => rt.deactivate(action.instance)?,
        }
        self.log.push(ActionLogRow {
            ts_us: rt.now(),
            kind: action.kind,
            component: action.component.clone(),
            node: action.instance.node,
            instance: action.instance,
            pool_size_after: rt.pool(&action.component).len(),
        });
        Ok(())
    }

    /// Observes every model of the runtime, decides and applies.
    pub fn tick(&mut self, rt: &mut Runtime) -> Result<Vec<ControlEvent>, RuntimeError> {
        let arrivals: BTreeMap<String, u64> = rt.model_ids().into_iter().map(|m| (m.clone(), rt.take_arrivals(&m))).collect();
        self.tick_with(rt, &arrivals)
    }

    /// Like [`Controller::tick`] with arrival counts the caller already collected.
    pub fn tick_with(&mut self, rt: &mut Runtime, arrivals: &BTreeMap<String, u64>) -> Result<Vec<ControlEvent>, RuntimeError> {
        let now = rt.now();
        let mut estimates = Vec::new();
        let mut views = BTreeMap::new();
        for model in rt.model_ids() {
            let n = arrivals.get(&model).copied().unwrap_or(0);
            estimates.push(self.observe(&model, n, now, rt.capacity_qps(&model)));
            views.insert(model.clone(), pool_view(rt, &model, self.standby.as_deref()));
        }
        let events = self.decide(&estimates, &views, now);
        for e in &events {
            if let ControlEvent::Action(a) = e {
                self.apply(rt, a)?;
            }
        }
        Ok(events)
    }

    /// CSV columns: ts_us, kind, component, node, instance, pool_size_after.
    pub fn write_action_log_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["ts_us", "kind", "component", "node", "instance", "pool_size_after"])?;
        for r in &self.log {
            w.write_record([
                r.ts_us.to_string(),
                r.kind.to_string(),
                r.component.clone(),
                r.node.to_string(),
                r.instance.to_string(),
                r.pool_size_after.to_string(),
            ])?;
        }
        w.flush()
    }
}
