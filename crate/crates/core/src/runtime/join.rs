//! Matched-set join for fan-in stages.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;

use super::{QueryId, RuntimeError};
use crate::clock::Micros;

#[derive(Debug)]
struct Partial {
    first_ts: Micros,
    got: BTreeMap<String, Bytes>,
}

/// Buffers upstream outputs per query until every input of the stage is present.
#[derive(Debug)]
pub struct JoinBuffer {
    stage: String,
    inputs: Vec<String>,
    partial: BTreeMap<QueryId, Partial>,
    done: BTreeSet<QueryId>,
}

impl JoinBuffer {
    pub fn new(stage: impl Into<String>, inputs: Vec<String>) -> Self {
        Self {
            stage: stage.into(),
            inputs,
            partial: BTreeMap::new(),
            done: BTreeSet::new(),
        }
    }

    /// Records one upstream output. Returns the inputs, in incast order, once the set is complete.
    pub fn arrive(&mut self, query: QueryId, upstream: &str, payload: Bytes, now: Micros) -> Result<Option<Vec<Bytes>>, RuntimeError> {
        let dup = || RuntimeError::DuplicateInput {
            query,
            stage: self.stage.clone(),
            upstream: upstream.to_string(),
        };
        if !self.inputs.iter().any(|i| i == upstream) {
            return Err(RuntimeError::BadSpec(format!("{upstream} is not an input of stage {}", self.stage)));
        }
        if self.done.contains(&query) {
            return Err(dup());
        }
        let entry = self.partial.entry(query).or_insert_with(|| Partial {
            first_ts: now,
            got: BTreeMap::new(),
        });
        if entry.got.contains_key(upstream) {
            return Err(dup());
        }
        entry.got.insert(upstream.to_string(), payload);
        if entry.got.len() < self.inputs.len() {
            return Ok(None);
        }
        let mut got = self.partial.remove(&query).expect("entry exists").got;
        self.done.insert(query);
        Ok(Some(self.inputs.iter().map(|i| got.remove(i).expect("complete set")).collect()))
    }

    /// Query ids completed by this arrival (zero or one).
    pub fn join_matched_sets(&mut self, query: QueryId, upstream: &str, payload: Bytes, now: Micros) -> Result<Vec<QueryId>, RuntimeError> {
        Ok(self.arrive(query, upstream, payload, now)?.map(|_| query).into_iter().collect())
    }

    /// Drops partial sets whose first input arrived at or before `now - timeout` and returns their ids.
    pub fn expire(&mut self, now: Micros, timeout: Micros) -> Vec<QueryId> {
        let stale: Vec<QueryId> = self
            .partial
            .iter()
            .filter(|(_, p)| p.first_ts + timeout <= now)
            .map(|(q, _)| *q)
            .collect();
        for q in &stale {
            self.partial.remove(q);
            self.done.insert(*q);
        }
        stale
    }

    pub fn is_pending(&self, query: QueryId) -> bool {
        self.partial.contains_key(&query)
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    /// Forgets a failed query so late inputs are rejected.
    pub fn discard(&mut self, query: QueryId) {
        self.partial.remove(&query);
        self.done.insert(query);
    }
}
