//! Exact branch-and-bound over per-node patterns.
//!
//! A pattern is a layout plus a multiset of models per group of equal-size
//! slices. Nodes are interchangeable, so a placement is a non-decreasing
//! sequence of pattern indices. Patterns that another pattern beats on every
//! model's throughput without using more replicas are dropped up front.
//!
//! Search runs twice: the first pass finds the optimal (vector, replica count)
//! pair, the second returns the first sequence in search order reaching it.

use std::cmp::Ordering;

use super::{ModelGroup, PlacementProblem, PlanError};
use crate::executor::MigLayout;

#[derive(Debug, Clone)]
struct Pattern {
    layout: usize,
    slots: Vec<Option<usize>>,
    contrib: Vec<u64>,
    replicas: u32,
}

/// Larger sorted vector first, then fewer replicas.
fn rank(a: &[u64], a_rep: u32, b: &[u64], b_rep: u32) -> Ordering {
    a.cmp(b).then(b_rep.cmp(&a_rep))
}

fn sorted(v: &[u64]) -> Vec<u64> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s
}

/// Non-decreasing sequences of length `k` over `0..n`.
fn multisets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in from..n {
            cur.push(i);
            rec(n, k, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

fn enumerate(layouts: &[MigLayout], t: &[Vec<(u32, u64)>]) -> Vec<Pattern> {
    let groups = t.len();
    let mut out = Vec::new();
    for (li, layout) in layouts.iter().enumerate() {
        // runs of equal sizes (sizes are sorted descending)
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &s in layout.sizes() {
            match runs.last_mut() {
                Some((size, k)) if *size == s => *k += 1,
                _ => runs.push((s, 1)),
            }
        }
        let mut partial: Vec<(Vec<Option<usize>>, Vec<u64>)> = vec![(Vec::new(), vec![0; groups])];
        for (size, k) in runs {
            let options: Vec<(usize, u64)> = (0..groups)
                .filter_map(|g| t[g].iter().find(|(s, _)| *s == size).map(|(_, v)| (g, *v)))
                .collect();
            let choices = multisets(options.len() + 1, k);
            let mut next = Vec::with_capacity(partial.len() * choices.len());
            for (slots, contrib) in &partial {
                for choice in &choices {
                    let mut slots = slots.clone();
                    let mut contrib = contrib.clone();
                    for &c in choice {
                        match options.get(c) {
                            Some(&(g, v)) => {
                                slots.push(Some(g));
                                contrib[g] += v;
                            }
                            None => slots.push(None),
                        }
                    }
                    next.push((slots, contrib));
                }
            }
            partial = next;
        }
        for (slots, contrib) in partial {
            let replicas = slots.iter().filter(|s| s.is_some()).count() as u32;
            out.push(Pattern {
                layout: li,
                slots,
                contrib,
                replicas,
            });
        }
    }
    out
}

fn dominates(q: &Pattern, p: &Pattern) -> bool {
    q.replicas <= p.replicas && q.contrib.iter().zip(&p.contrib).all(|(a, b)| a >= b)
}

fn prune_dominated(patterns: Vec<Pattern>) -> Vec<Pattern> {
    let mut keep = Vec::with_capacity(patterns.len());
    for (i, p) in patterns.iter().enumerate() {
        let beaten = patterns.iter().enumerate().any(|(j, q)| {
            j != i && dominates(q, p) && (!dominates(p, q) || j < i)
        });
        if !beaten {
            keep.push(p.clone());
        }
    }
    keep
}

struct Search<'a> {
    patterns: &'a [Pattern],
    nodes: usize,
    weights: Vec<f64>,
    weight_sum: f64,
    suffix_max: Vec<Vec<u64>>,
    suffix_score: Vec<f64>,
    suffix_min_rep: Vec<u32>,
    best_vec: Vec<u64>,
    best_rep: u32,
    best_seq: Vec<usize>,
    target: Option<(Vec<u64>, u32)>,
    found: bool,
}

impl Search<'_> {
    fn score(&self, contrib: &[u64]) -> f64 {
        contrib.iter().zip(&self.weights).map(|(c, w)| *c as f64 * w).sum()
    }

    /// False when no completion from this prefix can matter.
    fn promising(&self, from: usize, left: usize, cur: &[u64], cur_rep: u32) -> bool {
        let r = left as u64;
        let ub: Vec<u64> = cur.iter().zip(&self.suffix_max[from]).map(|(c, m)| c + r * m).collect();
        let ub = sorted(&ub);
        let rep_lb = cur_rep + left as u32 * self.suffix_min_rep[from];
        let avg = (self.score(cur) + left as f64 * self.suffix_score[from]) / self.weight_sum;
        let (goal_vec, goal_rep) = match &self.target {
            Some((v, r)) => (v, *r),
            None => (&self.best_vec, self.best_rep),
        };
        if avg + 1e-6 < goal_vec[0] as f64 {
            return false;
        }
        match ub.cmp(goal_vec) {
            Ordering::Less => false,
            Ordering::Greater => true,
            Ordering::Equal if self.target.is_some() => rep_lb <= goal_rep,
            Ordering::Equal => rep_lb < goal_rep,
        }
    }

    fn dfs(&mut self, from: usize, seq: &mut Vec<usize>, cur: &mut [u64], cur_rep: u32) {
        if self.found {
            return;
        }
        let left = self.nodes - seq.len();
        if left == 0 {
            let v = sorted(cur);
            match &self.target {
                Some((tv, tr)) => {
                    if &v == tv && cur_rep == *tr {
                        self.best_seq = seq.clone();
                        self.found = true;
                    }
                }
                None => {
                    if rank(&v, cur_rep, &self.best_vec, self.best_rep) == Ordering::Greater {
                        self.best_vec = v;
                        self.best_rep = cur_rep;
                        self.best_seq = seq.clone();
                    }
                }
            }
            return;
        }
        if !self.promising(from, left, cur, cur_rep) {
            return;
        }
        for j in from..self.patterns.len() {
            let p = &self.patterns[j];
            for (c, d) in cur.iter_mut().zip(&p.contrib) {
                *c += d;
            }
            seq.push(j);
            self.dfs(j, seq, cur, cur_rep + p.replicas);
            seq.pop();
            for (c, d) in cur.iter_mut().zip(&p.contrib) {
                *c -= d;
            }
            if self.found {
                return;
            }
        }
    }
}

fn greedy(patterns: &[Pattern], nodes: usize, groups: usize) -> (Vec<u64>, u32, Vec<usize>) {
    let mut cur = vec![0u64; groups];
    let mut rep = 0;
    let mut seq = Vec::new();
    for _ in 0..nodes {
        let mut best: Option<(Vec<u64>, u32, usize)> = None;
        for (j, p) in patterns.iter().enumerate() {
            let v: Vec<u64> = cur.iter().zip(&p.contrib).map(|(a, b)| a + b).collect();
            let v = sorted(&v);
            let better = match &best {
                None => true,
                Some((bv, br, _)) => rank(&v, rep + p.replicas, bv, *br) == Ordering::Greater,
            };
            if better {
                best = Some((v, rep + p.replicas, j));
            }
        }
        let (_, r, j) = best.expect("at least one pattern");
        for (c, d) in cur.iter_mut().zip(&patterns[j].contrib) {
            *c += d;
        }
        rep = r;
        seq.push(j);
    }
    seq.sort_unstable();
    (sorted(&cur), rep, seq)
}

pub(super) fn solve(problem: &PlacementProblem) -> Result<Vec<(MigLayout, Vec<Vec<String>>)>, PlanError> {
    let mut layouts: Vec<MigLayout> = Vec::new();
    for l in &problem.layouts {
        if !layouts.contains(l) {
            layouts.push(l.clone());
        }
    }
    let groups: Vec<ModelGroup> = problem
        .groups()
        .into_iter()
        .filter(|g| !problem.is_host_model(&g.model))
        .collect();
    let nodes = problem.nodes as usize;
    if groups.is_empty() {
        return Ok((0..nodes).map(|_| (layouts[0].clone(), vec![Vec::new(); layouts[0].sizes().len()])).collect());
    }
    if nodes == 0 {
        return Err(PlanError::Infeasible("no nodes".into()));
    }
    let mut sizes: Vec<u32> = layouts.iter().flat_map(|l| l.sizes().iter().copied()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let t: Vec<Vec<(u32, u64)>> = groups
        .iter()
        .map(|g| {
            sizes
                .iter()
                .filter_map(|&s| problem.t_milli(&g.model, s, g.max_batch).filter(|v| *v > 0).map(|v| (s, v)))
                .collect()
        })
        .collect();
    for (g, ts) in groups.iter().zip(&t) {
        if ts.is_empty() {
            return Err(PlanError::Infeasible(format!(
                "model {} fits no slice of the allowed layouts",
                g.model
            )));
        }
    }

    let mut patterns = prune_dominated(enumerate(&layouts, &t));
    let g_count = groups.len();
    let max_contrib: Vec<u64> = (0..g_count)
        .map(|g| patterns.iter().map(|p| p.contrib[g]).max().unwrap_or(0))
        .collect();
    let weights: Vec<f64> = max_contrib.iter().map(|m| 1.0 / (*m).max(1) as f64).collect();
    let score = |p: &Pattern| -> f64 { p.contrib.iter().zip(&weights).map(|(c, w)| *c as f64 * w).sum() };
    // Stable sort keeps enumeration order among equal scores.
    patterns.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap_or(Ordering::Equal));

    let n_pat = patterns.len();
    let mut suffix_max = vec![vec![0u64; g_count]; n_pat + 1];
    let mut suffix_score = vec![0.0f64; n_pat + 1];
    let mut suffix_min_rep = vec![u32::MAX; n_pat + 1];
    for j in (0..n_pat).rev() {
        for g in 0..g_count {
            suffix_max[j][g] = suffix_max[j + 1][g].max(patterns[j].contrib[g]);
        }
        suffix_score[j] = suffix_score[j + 1].max(score(&patterns[j]));
        suffix_min_rep[j] = suffix_min_rep[j + 1].min(patterns[j].replicas);
    }

    let (g_vec, g_rep, g_seq) = greedy(&patterns, nodes, g_count);
    let weight_sum = weights.iter().sum();
    let mut search = Search {
        patterns: &patterns,
        nodes,
        weights,
        weight_sum,
        suffix_max,
        suffix_score,
        suffix_min_rep,
        best_vec: g_vec,
        best_rep: g_rep,
        best_seq: g_seq,
        target: None,
        found: false,
    };
    let mut cur = vec![0u64; g_count];
    search.dfs(0, &mut Vec::new(), &mut cur, 0);

    search.target = Some((search.best_vec.clone(), search.best_rep));
    search.dfs(0, &mut Vec::new(), &mut cur, 0);
    debug_assert!(search.found, "second pass reaches the optimum");

    if search.best_vec[0] == 0 {
        return Err(PlanError::Infeasible(
            "not every model can receive a replica on the available nodes".into(),
        ));
    }

    Ok(search
        .best_seq
        .iter()
        .map(|&j| {
            let p = &patterns[j];
            let slots = p
                .slots
                .iter()
                .map(|s| s.map(|g| vec![groups[g].model.clone()]).unwrap_or_default())
                .collect();
            (layouts[p.layout].clone(), slots)
        })
        .collect())
}
