use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExecError, InstanceSize};
use crate::clock::Micros;

/// A slot on a node: MIG slice `slot` of node `node`'s GPU, or a host worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct InstanceId {
    pub node: u32,
    pub slot: u32,
}

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}.{}", self.node, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Empty,
    Preloading,
    Ready,
    Active,
    Draining,
}

/// A closed-open busy span `[start, end)` with a compute-activity weight in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusyInterval {
    pub start: Micros,
    pub end: Micros,
    pub weight: f64,
}

#[derive(Debug, Clone)]
struct Resident {
    memory_gb: f64,
    ready_at: Micros,
}

#[derive(Debug, Clone)]
pub struct AcceleratorInstance {
    pub id: InstanceId,
    pub size: InstanceSize,
    state: InstanceState,
    models: BTreeMap<String, Resident>,
    busy_until: Micros,
    busy: Vec<BusyInterval>,
}

/// When a batch ran, and whether it waited on a model load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchTiming {
    pub start: Micros,
    pub end: Micros,
    pub load_stall_us: Micros,
}

impl AcceleratorInstance {
    pub fn new(id: InstanceId, size: InstanceSize) -> Self {
        Self {
            id,
            size,
            state: InstanceState::Empty,
            models: BTreeMap::new(),
            busy_until: 0,
            busy: Vec::new(),
        }
    }

    pub fn state(&self) -> InstanceState {
        self.state
    }

    pub fn busy_until(&self) -> Micros {
        self.busy_until
    }

    pub fn busy_intervals(&self) -> &[BusyInterval] {
        &self.busy
    }

    pub fn used_gb(&self) -> f64 {
        self.models.values().map(|r| r.memory_gb).sum()
    }

    pub fn hosts(&self, model: &str) -> bool {
        self.models.contains_key(model)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    /// Time at which `model` becomes usable, if it is resident or loading.
    pub fn ready_at(&self, model: &str) -> Option<Micros> {
        self.models.get(model).map(|r| r.ready_at)
    }

    pub fn is_loaded(&self, model: &str, now: Micros) -> bool {
        self.ready_at(model).is_some_and(|t| t <= now)
    }

    fn bad(&self, to: InstanceState) -> ExecError {
        ExecError::BadTransition {
            instance: self.id,
            from: self.state,
            to,
        }
    }

    /// Starts loading `model`. A preload leaves the instance out of service
    /// (Preloading, then Ready); a cold load puts it straight into service and
    /// any batch waits for the load to finish. Loading a model that is
    /// already resident is a no-op returning its ready time.
    pub fn load_model(&mut self, model: &str, memory_gb: f64, preload: bool, now: Micros, delay_us: Micros) -> Result<Micros, ExecError> {
        if let Some(t) = self.ready_at(model) {
            return Ok(t);
        }
        let target = if preload {
            InstanceState::Preloading
        } else {
            InstanceState::Active
        };
        let allowed = match self.state {
            InstanceState::Empty => true,
            InstanceState::Preloading | InstanceState::Ready => preload,
            InstanceState::Active => !preload,
            InstanceState::Draining => false,
        };
        if !allowed {
            return Err(self.bad(target));
        }
        if self.used_gb() + memory_gb > self.size.capacity_gb() + 1e-9 {
            return Err(ExecError::OutOfMemory {
                instance: self.id,
                model: model.to_string(),
                need_gb: memory_gb,
                free_gb: self.size.capacity_gb() - self.used_gb(),
            });
        }
        let ready_at = now + delay_us;
        self.models.insert(
            model.to_string(),
            Resident {
                memory_gb,
                ready_at,
            },
        );
        self.state = target;
        Ok(ready_at)
    }

    /// Marks a finished preload: Preloading becomes Ready once every model is resident.
    pub fn finish_loads(&mut self, now: Micros) {
        if self.state == InstanceState::Preloading && self.models.values().all(|r| r.ready_at <= now) {
            self.state = InstanceState::Ready;
        }
    }

    /// Places a model that is already resident (deployment-time setup) and activates.
    pub fn install(&mut self, model: &str, memory_gb: f64) -> Result<(), ExecError> {
        if self.used_gb() + memory_gb > self.size.capacity_gb() + 1e-9 {
            return Err(ExecError::OutOfMemory {
                instance: self.id,
                model: model.to_string(),
                need_gb: memory_gb,
                free_gb: self.size.capacity_gb() - self.used_gb(),
            });
        }
        self.models.insert(
            model.to_string(),
            Resident {
                memory_gb,
                ready_at: 0,
            },
        );
        self.state = InstanceState::Active;
        Ok(())
    }

    pub fn activate(&mut self) -> Result<(), ExecError> {
        if self.state != InstanceState::Ready {
            return Err(self.bad(InstanceState::Active));
        }
        self.state = InstanceState::Active;
        Ok(())
    }

    pub fn start_drain(&mut self) -> Result<(), ExecError> {
        if self.state != InstanceState::Active {
            return Err(self.bad(InstanceState::Draining));
        }
        self.state = InstanceState::Draining;
        Ok(())
    }

    /// Completes a drain: unloads everything.
    pub fn finish_drain(&mut self) -> Result<(), ExecError> {
        if self.state != InstanceState::Draining {
            return Err(self.bad(InstanceState::Empty));
        }
        self.models.clear();
        self.state = InstanceState::Empty;
        Ok(())
    }

    /// Occupies the instance for `latency_us`, starting no earlier than
    /// `now`, the end of the previous batch, or the model's load completion.
    pub fn execute(&mut self, model: &str, now: Micros, latency_us: Micros, weight: f64) -> Result<BatchTiming, ExecError> {
        let ready_at = self.ready_at(model).ok_or_else(|| ExecError::ColdInstance {
            instance: self.id,
            model: model.to_string(),
        })?;
        if !matches!(self.state, InstanceState::Active | InstanceState::Draining) {
            return Err(ExecError::NotServing(self.id, self.state));
        }
        let free = now.max(self.busy_until);
        let start = free.max(ready_at);
        let end = start + latency_us.max(1);
        self.busy_until = end;
        self.busy.push(BusyInterval {
            start,
            end,
            weight: weight.clamp(0.0, 1.0),
        });
        Ok(BatchTiming {
            start,
            end,
            load_stall_us: start - free,
        })
    }

    /// Weighted busy fraction of `[from, to)`.
    pub fn gract(&self, from: Micros, to: Micros) -> Result<f64, ExecError> {
        gract_of(&self.busy, from, to)
    }
}

pub(crate) fn gract_of(busy: &[BusyInterval], from: Micros, to: Micros) -> Result<f64, ExecError> {
    if to <= from {
        return Err(ExecError::BadRange(from, to));
    }
    let covered: f64 = busy
        .iter()
        .map(|b| {
            let lo = b.start.max(from);
            let hi = b.end.min(to);
            hi.saturating_sub(lo) as f64 * b.weight
        })
        .sum();
    Ok((covered / (to - from) as f64).clamp(0.0, 1.0))
}
