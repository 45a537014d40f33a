//! Pipeline DAG description and validation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::RuntimeError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: String,
    pub model: String,
    pub max_batch: u32,
    /// Upstream stages whose outputs are joined per query. Filled from the
    /// edges when left empty.
    #[serde(default)]
    pub incast: Vec<String>,
    /// Keys (model weights, indices) this stage needs resident; they form one affinity group.
    #[serde(default)]
    pub deps: Vec<String>,
}

/// `["from", "to"]`, or `{"from", "to", "persist"}` for a handoff that is
/// stored as a versioned object rather than passed by trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeSpec {
    Pair(String, String),
    Full {
        from: String,
        to: String,
        #[serde(default)]
        persist: bool,
    },
}

impl EdgeSpec {
    pub fn from(&self) -> &str {
        match self {
            EdgeSpec::Pair(f, _) | EdgeSpec::Full { from: f, .. } => f,
        }
    }

    pub fn to(&self) -> &str {
        match self {
            EdgeSpec::Pair(_, t) | EdgeSpec::Full { to: t, .. } => t,
        }
    }

    pub fn persist(&self) -> bool {
        matches!(self, EdgeSpec::Full { persist: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ingress {
    One(String),
    Many(Vec<String>),
}

impl Ingress {
    pub fn stages(&self) -> Vec<&str> {
        match self {
            Ingress::One(s) => vec![s.as_str()],
            Ingress::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub edges: Vec<EdgeSpec>,
    pub ingress: Ingress,
    pub egress: String,
}

/// A validated pipeline with index-based adjacency.
#[derive(Debug, Clone)]
pub struct PipelineGraph {
    pub spec: PipelineSpec,
    pub index: BTreeMap<String, usize>,
    pub successors: Vec<Vec<(usize, bool)>>,
    pub incast: Vec<Vec<usize>>,
    pub ingress: Vec<usize>,
    pub egress: usize,
    pub topo: Vec<usize>,
}

impl PipelineSpec {
    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        serde_json::from_str(text).map_err(|e| RuntimeError::BadSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn stage(&self, id: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<PipelineGraph, RuntimeError> {
        let bad = |m: String| Err(RuntimeError::BadSpec(format!("{}: {m}", self.name)));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        let mut index = BTreeMap::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.max_batch == 0 {
                return bad(format!("stage {} has max_batch 0", s.id));
            }
            if s.model.is_empty() || s.model.contains('/') {
                return bad(format!("stage {} has an invalid model id {:?}", s.id, s.model));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return bad(format!("duplicate stage {}", s.id));
            }
        }
        let n = self.stages.len();
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| RuntimeError::BadSpec(format!("{}: unknown stage {id}", self.name)));
        let mut successors = vec![Vec::new(); n];
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            let (f, t) = (lookup(e.from())?, lookup(e.to())?);
            if !seen.insert((f, t)) {
                return bad(format!("duplicate edge {} -> {}", e.from(), e.to()));
            }
            successors[f].push((t, e.persist()));
            preds[t].push(f);
        }

        // Kahn's algorithm; leftover stages sit on a cycle.
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: VecDeque<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(i) = ready.pop_front() {
            topo.push(i);
            for &(j, _) in &successors[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        if topo.len() != n {
            let cyclic: Vec<&str> = (0..n).filter(|i| indeg[*i] > 0).map(|i| self.stages[i].id.as_str()).collect();
            return Err(RuntimeError::NotADag(format!("{}: cycle through {}", self.name, cyclic.join(", "))));
        }

        let ingress: Vec<usize> = self.ingress.stages().into_iter().map(lookup).collect::<Result<_, _>>()?;
        if ingress.is_empty() {
            return bad("no ingress stage".into());
        }
        for &i in &ingress {
            if !preds[i].is_empty() {
                return bad(format!("ingress stage {} has incoming edges", self.stages[i].id));
            }
        }
        let egress = lookup(&self.egress)?;
        if !successors[egress].is_empty() {
            return bad(format!("egress stage {} has outgoing edges", self.egress));
        }
        let mut reached = vec![false; n];
        let mut stack = ingress.clone();
        while let Some(i) = stack.pop() {
            if !std::mem::replace(&mut reached[i], true) {
                stack.extend(successors[i].iter().map(|(j, _)| *j));
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return bad(format!("stage {} is unreachable from ingress", self.stages[i].id));
        }

        let mut incast = Vec::with_capacity(n);
        for (i, s) in self.stages.iter().enumerate() {
            if s.incast.is_empty() {
                incast.push(preds[i].clone());
                continue;
            }
            let listed: Vec<usize> = s.incast.iter().map(|id| lookup(id)).collect::<Result<_, _>>()?;
            let a: BTreeSet<usize> = listed.iter().copied().collect();
            let b: BTreeSet<usize> = preds[i].iter().copied().collect();
            if a != b || a.len() != listed.len() {
                return bad(format!("stage {} incast list does not match its incoming edges", s.id));
            }
            incast.push(listed);
        }

        Ok(PipelineGraph {
            spec: self.clone(),
            index,
            successors,
            incast,
            ingress,
            egress,
            topo,
        })
    }
}

impl PipelineGraph {
    pub fn stage(&self, i: usize) -> &StageSpec {
        &self.spec.stages[i]
    }

    pub fn is_incast(&self, i: usize) -> bool {
        self.incast[i].len() >= 2
    }
}
