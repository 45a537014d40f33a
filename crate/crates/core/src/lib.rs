//! SLO-first serving of multi-stage ML pipelines.
//!
//! A sharded versioned key-value store doubles as the activation path between
//! pipeline stages. Stages run on a deterministic, profile-driven simulation of
//! MIG-partitioned accelerators, with opportunistic batching, ingress-fixed
//! routing tags and matched-set joins for fan-in stages. On top of that sit a
//! placement planner, an elasticity controller and a benchmark harness.

pub mod clock;
pub mod kvs;
pub mod executor;
pub mod planner;
pub mod runtime;
pub mod elasticity;
pub mod bench;
