//! Sharded, versioned key-value store.
//!
//! The store doubles as the pipeline activation path: components register
//! triggers on key prefixes and receive an upcall for every `put` (on every
//! replica, in the shard's total order) or for a `trigger_put` (on exactly one
//! member, nothing stored).
//!
//! Each shard has a single coordinator that assigns versions and strictly
//! increasing timestamps. A version is stable once every live replica of its
//! shard has acknowledged it; the shard's stability threshold is the minimum
//! acknowledged timestamp over its live replicas. Reads only ever observe
//! stable data, so everything at or below the threshold is immutable.
//!
//! Shard placement hashes the key (or its affinity group key) with 64-bit
//! FNV-1a and reduces modulo the pool's shard count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, ManualClock, Micros};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardId(pub u32);

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HandlerId(pub u32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvsError {
    #[error("invalid key {0:?}: keys are non-empty slash-separated paths")]
    InvalidKey(String),
    #[error("pool prefix {0} is already used or overlaps an existing pool")]
    PoolExists(String),
    #[error("no object pool covers key {0}")]
    NoSuchPool(String),
    #[error("pool needs at least one shard and one replica")]
    BadPool,
    #[error("no such shard {0}")]
    NoSuchShard(ShardId),
    #[error("put at {ts}us is too old (shard frontier {frontier}us)")]
    TooOld { ts: Micros, frontier: Micros },
    #[error("node {0} is not a member of the key's shard")]
    BadRoute(NodeId),
    #[error("no active member in shard")]
    NoWorker,
    #[error("key {0} not found")]
    NotFound(String),
    #[error("key {0} has no stable version yet")]
    NotStable(String),
    #[error("inverted range [{0}, {1}]")]
    BadRange(Micros, Micros),
    #[error("no handler registered with id {0:?}")]
    NoSuchHandler(HandlerId),
    #[error("affinity group {0}: {1}")]
    GroupConflict(String, String),
    #[error("timed out waiting for stable data")]
    Timeout,
}

pub type Result<T, E = KvsError> = std::result::Result<T, E>;

/// Hierarchical slash-separated key, e.g. `/flmr/models/colbert`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key(String);

impl Key {
    pub fn new(path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        if path.len() < 2 || !path.starts_with('/') || path.ends_with('/') || path.contains("//") {
            return Err(KvsError::InvalidKey(path));
        }
        Ok(Self(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True when `prefix` equals this key or is an ancestor path of it.
    pub fn has_prefix(&self, prefix: &Key) -> bool {
        path_has_prefix(&self.0, &prefix.0)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn path_has_prefix(path: &str, prefix: &str) -> bool {
    path == prefix || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'/'))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in data {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedObject {
    pub key: Key,
    pub version: u64,
    pub timestamp: Micros,
    pub payload: Bytes,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectPool {
    pub prefix: Key,
    pub shard_count: u32,
    pub replicas_per_shard: u32,
    pub shards: Vec<ShardId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerRegistration {
    pub prefix: Key,
    pub handler: HandlerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpcallKind {
    Put,
    TriggerPut,
}

/// Arguments of a trigger upcall. Key and payload are borrowed: in-process
/// delivery never copies them.
#[derive(Debug)]
pub struct Upcall<'a> {
    pub kind: UpcallKind,
    pub node: NodeId,
    pub shard: ShardId,
    pub key: &'a Key,
    pub payload: &'a Bytes,
    pub version: Option<u64>,
}

pub trait TriggerHandler: Send + Sync {
    fn on_trigger(&self, upcall: &Upcall<'_>);
}

impl<F> TriggerHandler for F
where
    F: Fn(&Upcall<'_>) + Send + Sync,
{
    fn on_trigger(&self, upcall: &Upcall<'_>) {
        self(upcall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOp {
    Put,
    TriggerPut,
}

impl LogOp {
    fn as_str(self) -> &'static str {
        match self {
            LogOp::Put => "put",
            LogOp::TriggerPut => "trigger_put",
        }
    }
}

/// One entry of a replica's delivery log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub seq: u64,
    pub op: LogOp,
    pub key: Key,
    pub version: u64,
    pub ts: Micros,
}

#[derive(Debug, Clone)]
pub struct TriggerAck {
    pub delivered_to: NodeId,
    pub reissued: bool,
}

#[derive(Debug)]
struct Replica {
    node: NodeId,
    live: bool,
    holding_acks: bool,
    delivered_ts: Micros,
    acked_ts: Micros,
    log: Vec<LogEntry>,
}

#[derive(Debug)]
struct Shard {
    id: ShardId,
    pool: usize,
    replicas: Vec<Replica>,
    newest_ts: Micros,
    threshold: Micros,
    next_seq: u64,
    rr_next: usize,
}

impl Shard {
    fn recompute_threshold(&mut self) {
        // An all-failed shard keeps its last frontier.
        if let Some(min) = self.replicas.iter().filter(|r| r.live).map(|r| r.acked_ts).min() {
            self.threshold = self.threshold.max(min);
        }
    }

    fn active_members(&self) -> Vec<NodeId> {
        self.replicas.iter().filter(|r| r.live).map(|r| r.node).collect()
    }
}

#[derive(Debug)]
struct PoolState {
    meta: ObjectPool,
    retain: Option<usize>,
}

#[derive(Debug, Clone)]
struct StoredVersion {
    version: u64,
    ts: Micros,
    payload: Bytes,
}

pub struct Kvs {
    clock: Arc<dyn Clock>,
    seed: u64,
    pools: Vec<PoolState>,
    shards: Vec<Shard>,
    objects: HashMap<Key, Vec<StoredVersion>>,
    groups: BTreeMap<String, BTreeSet<Key>>,
    group_of: HashMap<Key, String>,
    triggers: Vec<TriggerRegistration>,
    handlers: BTreeMap<HandlerId, Arc<dyn TriggerHandler>>,
    node_cache: BTreeMap<NodeId, BTreeSet<Key>>,
}

impl fmt::Debug for Kvs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kvs")
            .field("pools", &self.pools.len())
            .field("shards", &self.shards.len())
            .field("keys", &self.objects.len())
            .finish()
    }
}

impl Kvs {
    pub fn new(clock: Arc<dyn Clock>, seed: u64) -> Self {
        Self {
            clock,
            seed,
            pools: Vec::new(),
            shards: Vec::new(),
            objects: HashMap::new(),
            groups: BTreeMap::new(),
            group_of: HashMap::new(),
            triggers: Vec::new(),
            handlers: BTreeMap::new(),
            node_cache: BTreeMap::new(),
        }
    }

    /// A store on a fresh manual clock starting at 0.
    pub fn with_manual_clock(seed: u64) -> (Self, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(0));
        (Self::new(clock.clone(), seed), clock)
    }

    pub fn now(&self) -> Micros {
        self.clock.now_us()
    }

    /// Creates a pool whose shard `s` is served by nodes
    /// `s * replicas .. (s + 1) * replicas` offset past every node id already in use.
    pub fn create_pool(&mut self, prefix: &str, shard_count: u32, replicas: u32) -> Result<ObjectPool> {
        if shard_count == 0 || replicas == 0 {
            return Err(KvsError::BadPool);
        }
        let base = self
            .shards
            .iter()
            .flat_map(|s| s.replicas.iter().map(|r| r.node + 1))
            .max()
            .unwrap_or(0);
        let members = (0..shard_count)
            .map(|s| (0..replicas).map(|r| base + s * replicas + r).collect())
            .collect();
        self.create_pool_with_members(prefix, members)
    }

    /// Creates a pool with explicit shard membership (one node list per shard).
    pub fn create_pool_with_members(&mut self, prefix: &str, members: Vec<Vec<NodeId>>) -> Result<ObjectPool> {
        let prefix = Key::new(prefix)?;
        if members.is_empty() || members.iter().any(|m| m.is_empty()) {
            return Err(KvsError::BadPool);
        }
        if self
            .pools
            .iter()
            .any(|p| prefix.has_prefix(&p.meta.prefix) || p.meta.prefix.has_prefix(&prefix))
        {
            return Err(KvsError::PoolExists(prefix.0));
        }
        let pool_idx = self.pools.len();
        let mut shard_ids = Vec::with_capacity(members.len());
        let replicas_per_shard = members[0].len() as u32;
        for nodes in members {
            let id = ShardId(self.shards.len() as u32);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(&id.0.to_le_bytes()));
            let rr_next = rng.random_range(0..nodes.len());
            self.shards.push(Shard {
                id,
                pool: pool_idx,
                replicas: nodes
                    .into_iter()
                    .map(|node| Replica {
                        node,
                        live: true,
                        holding_acks: false,
                        delivered_ts: 0,
                        acked_ts: 0,
                        log: Vec::new(),
                    })
                    .collect(),
                newest_ts: 0,
                threshold: 0,
                next_seq: 0,
                rr_next,
            });
            shard_ids.push(id);
        }
        let meta = ObjectPool {
            prefix,
            shard_count: shard_ids.len() as u32,
            replicas_per_shard,
            shards: shard_ids,
        };
        self.pools.push(PoolState {
            meta: meta.clone(),
            retain: None,
        });
        Ok(meta)
    }

    /// Caps retained history per key; the oldest stable versions are evicted first.
    pub fn set_retention(&mut self, prefix: &str, max_versions: Option<usize>) -> Result<()> {
        let prefix = Key::new(prefix)?;
        let pool = self
            .pools
            .iter_mut()
            .find(|p| p.meta.prefix == prefix)
            .ok_or_else(|| KvsError::NoSuchPool(prefix.0.clone()))?;
        pool.retain = max_versions.map(|m| m.max(1));
        Ok(())
    }

    pub fn pools(&self) -> impl Iterator<Item = &ObjectPool> {
        self.pools.iter().map(|p| &p.meta)
    }

    fn pool_index(&self, key: &Key) -> Result<usize> {
        self.pools
            .iter()
            .position(|p| key.has_prefix(&p.meta.prefix))
            .ok_or_else(|| KvsError::NoSuchPool(key.0.clone()))
    }

    pub fn shard_of(&self, key: &Key) -> Result<ShardId> {
        let pool = &self.pools[self.pool_index(key)?].meta;
        let hashed = match self.group_of.get(key) {
            Some(group) => fnv1a64(group.as_bytes()),
            None => fnv1a64(key.0.as_bytes()),
        };
        Ok(pool.shards[(hashed % u64::from(pool.shard_count)) as usize])
    }

    fn shard(&self, id: ShardId) -> Result<&Shard> {
        self.shards.get(id.0 as usize).ok_or(KvsError::NoSuchShard(id))
    }

    fn shard_mut(&mut self, id: ShardId) -> Result<&mut Shard> {
        self.shards.get_mut(id.0 as usize).ok_or(KvsError::NoSuchShard(id))
    }

    pub fn members(&self, shard: ShardId) -> Result<Vec<NodeId>> {
        Ok(self.shard(shard)?.replicas.iter().map(|r| r.node).collect())
    }

    pub fn active_members(&self, shard: ShardId) -> Result<Vec<NodeId>> {
        Ok(self.shard(shard)?.active_members())
    }

    /// Adds a node to a shard. It joins caught up to the current frontier.
    pub fn add_member(&mut self, shard: ShardId, node: NodeId) -> Result<()> {
        let s = self.shard_mut(shard)?;
        if let Some(r) = s.replicas.iter_mut().find(|r| r.node == node) {
            r.live = true;
            return Ok(());
        }
        let ts = s.newest_ts;
        s.replicas.push(Replica {
            node,
            live: true,
            holding_acks: false,
            delivered_ts: ts,
            acked_ts: ts,
            log: Vec::new(),
        });
        Ok(())
    }

    /// Marks a member failed (or recovered). Failed members receive nothing
    /// and do not hold back the stability threshold.
    pub fn set_live(&mut self, shard: ShardId, node: NodeId, live: bool) -> Result<()> {
        let s = self.shard_mut(shard)?;
        let r = s
            .replicas
            .iter_mut()
            .find(|r| r.node == node)
            .ok_or(KvsError::BadRoute(node))?;
        r.live = live;
        if live {
            r.delivered_ts = r.delivered_ts.max(s.newest_ts);
            r.acked_ts = r.acked_ts.max(s.newest_ts);
        }
        s.recompute_threshold();
        Ok(())
    }

    /// Test hook: while held, the replica receives puts but does not acknowledge them.
    pub fn hold_acks(&mut self, shard: ShardId, node: NodeId, hold: bool) -> Result<()> {
        let s = self.shard_mut(shard)?;
        let r = s
            .replicas
            .iter_mut()
            .find(|r| r.node == node)
            .ok_or(KvsError::BadRoute(node))?;
        r.holding_acks = hold;
        if !hold {
            r.acked_ts = r.delivered_ts;
        }
        s.recompute_threshold();
        self.enforce_retention();
        Ok(())
    }

    pub fn add_handler(&mut self, id: HandlerId, handler: Arc<dyn TriggerHandler>) {
        self.handlers.insert(id, handler);
    }

    pub fn has_handler(&self, id: HandlerId) -> bool {
        self.handlers.contains_key(&id)
    }

    pub fn register_trigger(&mut self, prefix: &str, handler: HandlerId) -> Result<TriggerRegistration> {
        let prefix = Key::new(prefix)?;
        if !self.handlers.contains_key(&handler) {
            return Err(KvsError::NoSuchHandler(handler));
        }
        let reg = TriggerRegistration { prefix, handler };
        self.triggers.push(reg.clone());
        Ok(reg)
    }

    fn matching_handlers(&self, key: &Key) -> Vec<Arc<dyn TriggerHandler>> {
        self.triggers
            .iter()
            .filter(|t| key.has_prefix(&t.prefix))
            .filter_map(|t| self.handlers.get(&t.handler).cloned())
            .collect()
    }

    /// Stores a new version stamped with the coordinator's clock.
    pub fn put(&mut self, key: &Key, payload: impl Into<Bytes>) -> Result<VersionedObject> {
        let shard = self.shard_of(key)?;
        let s = self.shard(shard)?;
        let ts = self.clock.now_us().max(s.newest_ts + 1);
        self.append(key, shard, ts, payload.into())
    }

    /// Stores a new version with a caller-chosen timestamp. Timestamps at or
    /// below the shard's stable frontier (or its newest entry) are rejected.
    pub fn put_at(&mut self, key: &Key, payload: impl Into<Bytes>, ts: Micros) -> Result<VersionedObject> {
        let shard = self.shard_of(key)?;
        let s = self.shard(shard)?;
        let frontier = s.threshold.max(s.newest_ts);
        if ts <= frontier {
            return Err(KvsError::TooOld { ts, frontier });
        }
        self.append(key, shard, ts, payload.into())
    }

    fn append(&mut self, key: &Key, shard: ShardId, ts: Micros, payload: Bytes) -> Result<VersionedObject> {
        let version = self.objects.get(key).and_then(|v| v.last()).map_or(1, |v| v.version + 1);
        let handlers = self.matching_handlers(key);
        let s = self.shard_mut(shard)?;
        s.newest_ts = ts;
        let seq = s.next_seq;
        s.next_seq += 1;
        let shard_id = s.id;
        let mut delivered = Vec::new();
        for r in s.replicas.iter_mut().filter(|r| r.live) {
            r.log.push(LogEntry {
                seq,
                op: LogOp::Put,
                key: key.clone(),
                version,
                ts,
            });
            r.delivered_ts = ts;
            if !r.holding_acks {
                r.acked_ts = ts;
            }
            delivered.push(r.node);
        }
        s.recompute_threshold();
        let stable = ts <= s.threshold;
        self.objects.entry(key.clone()).or_default().push(StoredVersion {
            version,
            ts,
            payload: payload.clone(),
        });
        for node in delivered {
            let up = Upcall {
                kind: UpcallKind::Put,
                node,
                shard: shard_id,
                key,
                payload: &payload,
                version: Some(version),
            };
            for h in &handlers {
                h.on_trigger(&up);
            }
        }
        self.enforce_retention_for(key);
        Ok(VersionedObject {
            key: key.clone(),
            version,
            timestamp: ts,
            payload,
            stable,
        })
    }

    fn enforce_retention(&mut self) {
        let keys: Vec<Key> = self.objects.keys().cloned().collect();
        for key in keys {
            self.enforce_retention_for(&key);
        }
    }

    fn enforce_retention_for(&mut self, key: &Key) {
        let Ok(pool) = self.pool_index(key) else { return };
        let Some(cap) = self.pools[pool].retain else { return };
        let Ok(threshold) = self.threshold_for(key) else { return };
        let Some(versions) = self.objects.get_mut(key) else { return };
        if versions.len() <= cap {
            return;
        }
        // Never evict the newest stable version, nor anything unstable.
        let stable_count = versions.iter().filter(|v| v.ts <= threshold).count();
        let evictable = (versions.len() - cap).min(stable_count.saturating_sub(1));
        versions.drain(..evictable);
    }

    fn routed_delivery(&mut self, key: &Key, payload: Bytes, node: NodeId, shard: ShardId) {
        let handlers = self.matching_handlers(key);
        let s = &mut self.shards[shard.0 as usize];
        let seq = s.next_seq;
        s.next_seq += 1;
        let ts = self.clock.now_us();
        if let Some(r) = s.replicas.iter_mut().find(|r| r.node == node) {
            r.log.push(LogEntry {
                seq,
                op: LogOp::TriggerPut,
                key: key.clone(),
                version: 0,
                ts,
            });
        }
        let up = Upcall {
            kind: UpcallKind::TriggerPut,
            node,
            shard,
            key,
            payload: &payload,
            version: None,
        };
        for h in &handlers {
            h.on_trigger(&up);
        }
    }

    /// Fires the key's trigger on `target` only. Nothing is stored. A failed
    /// target is detected and the upcall is reissued once to a live member.
    pub fn trigger_put_routed(&mut self, key: &Key, payload: impl Into<Bytes>, target: NodeId) -> Result<TriggerAck> {
        let shard = self.shard_of(key)?;
        let s = self.shard(shard)?;
        let member = s
            .replicas
            .iter()
            .find(|r| r.node == target)
            .ok_or(KvsError::BadRoute(target))?;
        if member.live {
            self.routed_delivery(key, payload.into(), target, shard);
            return Ok(TriggerAck {
                delivered_to: target,
                reissued: false,
            });
        }
        let node = self.next_balanced(shard)?;
        self.routed_delivery(key, payload.into(), node, shard);
        Ok(TriggerAck {
            delivered_to: node,
            reissued: true,
        })
    }

    /// Fires the key's trigger on one live member, chosen round-robin from a
    /// seeded random starting offset.
    pub fn trigger_put_balanced(&mut self, key: &Key, payload: impl Into<Bytes>) -> Result<TriggerAck> {
        let shard = self.shard_of(key)?;
        let node = self.next_balanced(shard)?;
        self.routed_delivery(key, payload.into(), node, shard);
        Ok(TriggerAck {
            delivered_to: node,
            reissued: false,
        })
    }

    fn next_balanced(&mut self, shard: ShardId) -> Result<NodeId> {
        let s = self.shard_mut(shard)?;
        let active = s.active_members();
        if active.is_empty() {
            return Err(KvsError::NoWorker);
        }
        let node = active[s.rr_next % active.len()];
        s.rr_next = s.rr_next.wrapping_add(1);
        Ok(node)
    }

    fn threshold_for(&self, key: &Key) -> Result<Micros> {
        Ok(self.shard(self.shard_of(key)?)?.threshold)
    }

    fn materialize(key: &Key, v: &StoredVersion, threshold: Micros) -> VersionedObject {
        VersionedObject {
            key: key.clone(),
            version: v.version,
            timestamp: v.ts,
            payload: v.payload.clone(),
            stable: v.ts <= threshold,
        }
    }

    /// Newest stable version.
    pub fn get(&self, key: &Key) -> Result<VersionedObject> {
        let threshold = self.threshold_for(key)?;
        let versions = self
            .objects
            .get(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| KvsError::NotFound(key.0.clone()))?;
        versions
            .iter()
            .rev()
            .find(|v| v.ts <= threshold)
            .map(|v| Self::materialize(key, v, threshold))
            .ok_or_else(|| KvsError::NotStable(key.0.clone()))
    }

    /// Newest stable version whose timestamp is not later than `t`.
    pub fn get_at(&self, key: &Key, t: Micros) -> Result<VersionedObject> {
        let threshold = self.threshold_for(key)?;
        let versions = self.objects.get(key).map(Vec::as_slice).unwrap_or_default();
        if t > threshold && versions.iter().any(|v| v.ts > threshold && v.ts <= t) {
            return Err(KvsError::NotStable(key.0.clone()));
        }
        versions
            .iter()
            .rev()
            .find(|v| v.ts <= t && v.ts <= threshold)
            .map(|v| Self::materialize(key, v, threshold))
            .ok_or_else(|| KvsError::NotFound(key.0.clone()))
    }

    /// Every retained stable version with timestamp in `[from, to]`, ascending.
    pub fn get_versions(&self, key: &Key, from: Micros, to: Micros) -> Result<Vec<VersionedObject>> {
        if from > to {
            return Err(KvsError::BadRange(from, to));
        }
        let threshold = self.threshold_for(key)?;
        Ok(self
            .objects
            .get(key)
            .map(|versions| {
                versions
                    .iter()
                    .filter(|v| v.ts >= from && v.ts <= to && v.ts <= threshold)
                    .map(|v| Self::materialize(key, v, threshold))
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn stability_threshold(&self, shard: ShardId) -> Result<Micros> {
        Ok(self.shard(shard)?.threshold)
    }

    pub fn replica_log(&self, shard: ShardId, node: NodeId) -> Result<&[LogEntry]> {
        self.shard(shard)?
            .replicas
            .iter()
            .find(|r| r.node == node)
            .map(|r| r.log.as_slice())
            .ok_or(KvsError::BadRoute(node))
    }

    /// Pins every member key to the shard chosen by hashing `group_key`.
    /// Members must live in one pool and must not have been written yet.
    pub fn create_affinity_group(&mut self, group_key: &str, members: &[Key]) -> Result<()> {
        let conflict = |why: &str| KvsError::GroupConflict(group_key.to_string(), why.to_string());
        if self.groups.contains_key(group_key) {
            return Err(conflict("already exists"));
        }
        let mut pool = None;
        for k in members {
            let p = self.pool_index(k)?;
            if *pool.get_or_insert(p) != p {
                return Err(conflict("members span pools"));
            }
            if self.group_of.contains_key(k) {
                return Err(conflict("member already grouped"));
            }
            if self.objects.contains_key(k) {
                return Err(conflict("member already written"));
            }
        }
        for k in members {
            self.group_of.insert(k.clone(), group_key.to_string());
        }
        self.groups.insert(group_key.to_string(), members.iter().cloned().collect());
        Ok(())
    }

    pub fn group_members(&self, group_key: &str) -> Option<&BTreeSet<Key>> {
        self.groups.get(group_key)
    }

    /// Loads every written member of a group into `node`'s cache as a unit.
    pub fn fetch_group(&mut self, group_key: &str, node: NodeId) -> Result<Vec<VersionedObject>> {
        let members = self
            .groups
            .get(group_key)
            .cloned()
            .ok_or_else(|| KvsError::GroupConflict(group_key.to_string(), "unknown group".into()))?;
        let mut out = Vec::new();
        for k in &members {
            match self.get(k) {
                Ok(v) => out.push(v),
                Err(KvsError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.node_cache.entry(node).or_default().extend(members);
        Ok(out)
    }

    /// Drops every member of a group from `node`'s cache.
    pub fn evict_group(&mut self, group_key: &str, node: NodeId) {
        if let (Some(members), Some(cache)) = (self.groups.get(group_key), self.node_cache.get_mut(&node)) {
            cache.retain(|k| !members.contains(k));
        }
    }

    pub fn cached_keys(&self, node: NodeId) -> Vec<Key> {
        self.node_cache.get(&node).map(|c| c.iter().cloned().collect()).unwrap_or_default()
    }

    /// CSV columns: shard_id, replica_id, seq, op, key, version, ts_us.
    pub fn write_event_log_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["shard_id", "replica_id", "seq", "op", "key", "version", "ts_us"])?;
        for s in &self.shards {
            for r in &s.replicas {
                for e in &r.log {
                    w.write_record([
                        s.id.0.to_string(),
                        r.node.to_string(),
                        e.seq.to_string(),
                        e.op.as_str().to_string(),
                        e.key.0.clone(),
                        e.version.to_string(),
                        e.ts.to_string(),
                    ])?;
                }
            }
        }
        w.flush()
    }

    pub fn shard_pool_prefix(&self, shard: ShardId) -> Result<&Key> {
        let s = self.shard(shard)?;
        Ok(&self.pools[s.pool].meta.prefix)
    }
}

/// Tracks a client's own writes so reads never go back in time.
#[derive(Debug, Default)]
pub struct Session {
    written: HashMap<Key, u64>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, kvs: &mut Kvs, key: &Key, payload: impl Into<Bytes>) -> Result<VersionedObject> {
        let v = kvs.put(key, payload)?;
        self.written.insert(key.clone(), v.version);
        Ok(v)
    }

    /// Fails with `NotStable` rather than return a version older than this session's last write.
    pub fn get(&self, kvs: &Kvs, key: &Key) -> Result<VersionedObject> {
        let v = kvs.get(key)?;
        match self.written.get(key) {
            Some(&mine) if v.version < mine => Err(KvsError::NotStable(key.0.clone())),
            _ => Ok(v),
        }
    }
}

/// A store shared across threads; readers can wait for stabilization.
#[derive(Clone)]
pub struct SharedKvs {
    inner: Arc<(Mutex<Kvs>, Condvar)>,
}

impl SharedKvs {
    pub fn new(kvs: Kvs) -> Self {
        Self {
            inner: Arc::new((Mutex::new(kvs), Condvar::new())),
        }
    }

    /// Runs a mutation and wakes any blocked readers.
    pub fn with<R>(&self, f: impl FnOnce(&mut Kvs) -> R) -> R {
        let (lock, cv) = &*self.inner;
        let mut guard = lock.lock().expect("kvs lock poisoned");
        let out = f(&mut guard);
        cv.notify_all();
        out
    }

    /// Like [`Kvs::get`], but waits while the key only has unstable versions.
    pub fn get_blocking(&self, key: &Key, timeout: Duration) -> Result<VersionedObject> {
        let (lock, cv) = &*self.inner;
        let deadline = Instant::now() + timeout;
        let mut guard = lock.lock().expect("kvs lock poisoned");
        loop {
            match guard.get(key) {
                Err(KvsError::NotStable(_)) => {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(KvsError::Timeout);
                    }
                    guard = cv.wait_timeout(guard, left).expect("kvs lock poisoned").0;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn k(s: &str) -> Key {
        Key::new(s).unwrap()
    }

    fn store() -> (Kvs, Arc<ManualClock>) {
        Kvs::with_manual_clock(7)
    }

    #[test]
    fn create_pool_echoes_and_rejects_overlap() {
        let (mut kvs, _) = store();
        let p = kvs.create_pool("/flmr", 4, 2).unwrap();
        assert_eq!((p.shard_count, p.replicas_per_shard), (4, 2));
        assert_eq!(kvs.create_pool("/flmr", 4, 2), Err(KvsError::PoolExists("/flmr".into())));
        assert!(matches!(kvs.create_pool("/flmr/models", 1, 1), Err(KvsError::PoolExists(_))));
        // sibling names that merely share characters do not overlap
        assert!(kvs.create_pool("/flmrx", 1, 1).is_ok());
        assert_eq!(kvs.create_pool("/z", 0, 1), Err(KvsError::BadPool));
    }

    #[test]
    fn keys_must_be_paths() {
        assert!(Key::new("").is_err());
        assert!(Key::new("nope").is_err());
        assert!(Key::new("/a//b").is_err());
        assert!(Key::new("/a/b").is_ok());
    }

    #[test]
    fn shard_of_is_deterministic_and_groups_collocate() {
        let (mut kvs, _) = store();
        kvs.create_pool("/p", 8, 1).unwrap();
        let a = k("/p/weights");
        let b = k("/p/index");
        kvs.create_affinity_group("preflmr-deps", &[a.clone(), b.clone()]).unwrap();
        assert_eq!(kvs.shard_of(&a).unwrap(), kvs.shard_of(&a).unwrap());
        assert_eq!(kvs.shard_of(&a).unwrap(), kvs.shard_of(&b).unwrap());
        assert!(matches!(kvs.shard_of(&k("/other/x")), Err(KvsError::NoSuchPool(_))));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn versions_start_at_one_and_reach_every_replica_in_order() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 3).unwrap();
        let key = k("/p/x");
        clock.set(10);
        assert_eq!(kvs.put(&key, "a").unwrap().version, 1);
        clock.set(20);
        assert_eq!(kvs.put(&key, "b").unwrap().version, 2);
        let shard = kvs.shard_of(&key).unwrap();
        let logs: Vec<Vec<u64>> = kvs
            .members(shard)
            .unwrap()
            .iter()
            .map(|n| kvs.replica_log(shard, *n).unwrap().iter().map(|e| e.version).collect())
            .collect();
        assert!(logs.iter().all(|l| l == &vec![1, 2]));
    }

    #[test]
    fn back_dated_put_is_too_old() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 2).unwrap();
        let key = k("/p/x");
        clock.set(100);
        kvs.put(&key, "a").unwrap();
        let shard = kvs.shard_of(&key).unwrap();
        assert!(kvs.stability_threshold(shard).unwrap() >= 100);
        assert!(matches!(kvs.put_at(&key, "old", 50), Err(KvsError::TooOld { .. })));
        assert!(matches!(kvs.put_at(&key, "same", 100), Err(KvsError::TooOld { .. })));
        assert_eq!(kvs.put_at(&key, "new", 101).unwrap().version, 2);
    }

    #[test]
    fn fresh_shard_threshold_is_zero() {
        let (mut kvs, _) = store();
        let p = kvs.create_pool("/p", 2, 2).unwrap();
        assert_eq!(kvs.stability_threshold(p.shards[1]).unwrap(), 0);
    }

    #[test]
    fn get_and_get_at() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 2).unwrap();
        let key = k("/p/x");
        assert!(matches!(kvs.get(&key), Err(KvsError::NotFound(_))));
        clock.set(10);
        kvs.put(&key, "v10").unwrap();
        clock.set(20);
        kvs.put(&key, "v20").unwrap();
        assert_eq!(kvs.get(&key).unwrap().payload, Bytes::from("v20"));
        assert_eq!(kvs.get_at(&key, 15).unwrap().payload, Bytes::from("v10"));
        assert_eq!(kvs.get_at(&key, 15).unwrap(), kvs.get_at(&key, 15).unwrap());
        assert!(matches!(kvs.get_at(&key, 5), Err(KvsError::NotFound(_))));
    }

    #[test]
    fn unstable_versions_are_invisible_until_acked() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 2).unwrap();
        let key = k("/p/x");
        let shard = kvs.shard_of(&key).unwrap();
        let lagging = kvs.members(shard).unwrap()[1];
        clock.set(10);
        kvs.put(&key, "v1").unwrap();
        kvs.hold_acks(shard, lagging, true).unwrap();
        clock.set(20);
        let v2 = kvs.put(&key, "v2").unwrap();
        assert!(!v2.stable);
        assert_eq!(kvs.get(&key).unwrap().version, 1);
        assert!(matches!(kvs.get_at(&key, 25), Err(KvsError::NotStable(_))));
        kvs.hold_acks(shard, lagging, false).unwrap();
        assert_eq!(kvs.get(&key).unwrap().version, 2);
    }

    #[test]
    fn only_unstable_versions_block_until_stable() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 2).unwrap();
        let key = k("/p/x");
        let shard = kvs.shard_of(&key).unwrap();
        let lagging = kvs.members(shard).unwrap()[0];
        kvs.hold_acks(shard, lagging, true).unwrap();
        clock.set(5);
        kvs.put(&key, "v1").unwrap();
        assert!(matches!(kvs.get(&key), Err(KvsError::NotStable(_))));

        let shared = SharedKvs::new(kvs);
        let reader = {
            let shared = shared.clone();
            let key = key.clone();
            std::thread::spawn(move || shared.get_blocking(&key, Duration::from_secs(10)))
        };
        std::thread::sleep(Duration::from_millis(20));
        shared.with(|kvs| kvs.hold_acks(shard, lagging, false)).unwrap();
        assert_eq!(reader.join().unwrap().unwrap().version, 1);
        assert_eq!(
            shared.get_blocking(&k("/p/missing"), Duration::from_millis(1)),
            Err(KvsError::NotFound("/p/missing".into()))
        );
    }

    #[test]
    fn get_versions_ranges() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 1).unwrap();
        let key = k("/p/x");
        for t in [10, 20, 30] {
            clock.set(t);
            kvs.put(&key, t.to_string()).unwrap();
        }
        let all: Vec<u64> = kvs.get_versions(&key, 0, 100).unwrap().iter().map(|v| v.version).collect();
        assert_eq!(all, vec![1, 2, 3]);
        assert!(kvs.get_versions(&key, 40, 50).unwrap().is_empty());
        assert_eq!(kvs.get_versions(&key, 5, 1), Err(KvsError::BadRange(5, 1)));
    }

    #[test]
    fn retention_evicts_oldest_stable() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 1).unwrap();
        kvs.set_retention("/p", Some(2)).unwrap();
        let key = k("/p/x");
        for t in 1..=5 {
            clock.set(t * 10);
            kvs.put(&key, "x").unwrap();
        }
        let kept: Vec<u64> = kvs.get_versions(&key, 0, 1000).unwrap().iter().map(|v| v.version).collect();
        assert_eq!(kept, vec![4, 5]);
    }

    #[test]
    fn triggers_fire_on_matching_prefix_only() {
        let (mut kvs, _) = store();
        kvs.create_pool("/a", 1, 2).unwrap();
        kvs.create_pool("/b", 1, 1).unwrap();
        let hits_a = Arc::new(AtomicUsize::new(0));
        let hits_b = Arc::new(AtomicUsize::new(0));
        let (ha, hb) = (hits_a.clone(), hits_b.clone());
        kvs.add_handler(HandlerId(1), Arc::new(move |_: &Upcall<'_>| {
            ha.fetch_add(1, Ordering::SeqCst);
        }));
        kvs.add_handler(HandlerId(2), Arc::new(move |_: &Upcall<'_>| {
            hb.fetch_add(1, Ordering::SeqCst);
        }));
        assert_eq!(kvs.register_trigger("/a", HandlerId(9)), Err(KvsError::NoSuchHandler(HandlerId(9))));
        kvs.put(&k("/a/x"), "early").unwrap();
        kvs.register_trigger("/a", HandlerId(1)).unwrap();
        kvs.register_trigger("/b", HandlerId(2)).unwrap();
        assert_eq!(hits_a.load(Ordering::SeqCst), 0, "registration is not retroactive");
        kvs.put(&k("/a/x"), "v").unwrap();
        assert_eq!(hits_a.load(Ordering::SeqCst), 2, "one upcall per replica");
        assert_eq!(hits_b.load(Ordering::SeqCst), 0);
        kvs.put(&k("/b/y"), "v").unwrap();
        assert_eq!(hits_b.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn routed_trigger_targets_one_node_and_stores_nothing() {
        let (mut kvs, _) = store();
        let pool = kvs.create_pool_with_members("/m", vec![vec![1, 2, 3]]).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        kvs.add_handler(HandlerId(1), Arc::new(move |u: &Upcall<'_>| {
            s2.lock().unwrap().push((u.node, u.key.to_string()));
        }));
        kvs.register_trigger("/m", HandlerId(1)).unwrap();
        let key = k("/m/q/1");
        let ack = kvs.trigger_put_routed(&key, "x", 2).unwrap();
        assert_eq!(ack.delivered_to, 2);
        assert_eq!(*seen.lock().unwrap(), vec![(2, "/m/q/1".to_string())]);
        assert!(matches!(kvs.get(&key), Err(KvsError::NotFound(_))));
        assert_eq!(kvs.trigger_put_routed(&key, "x", 9).unwrap_err(), KvsError::BadRoute(9));

        // failed target: reissued exactly once to a live member
        kvs.set_live(pool.shards[0], 2, false).unwrap();
        seen.lock().unwrap().clear();
        let ack = kvs.trigger_put_routed(&key, "x", 2).unwrap();
        assert!(ack.reissued);
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 1);
        assert_ne!(seen[0].0, 2);
    }

    #[test]
    fn balanced_trigger_round_robins_over_active_members() {
        let (mut kvs, _) = store();
        let pool = kvs.create_pool_with_members("/m", vec![vec![1, 2, 3]]).unwrap();
        let key = k("/m/q");
        let mut counts = BTreeMap::new();
        for _ in 0..3000 {
            *counts.entry(kvs.trigger_put_balanced(&key, "x").unwrap().delivered_to).or_insert(0) += 1;
        }
        assert!(counts.values().all(|c| (900..=1100).contains(c)), "{counts:?}");
        kvs.set_live(pool.shards[0], 1, false).unwrap();
        kvs.set_live(pool.shards[0], 3, false).unwrap();
        assert_eq!(kvs.trigger_put_balanced(&key, "x").unwrap().delivered_to, 2);
        kvs.set_live(pool.shards[0], 2, false).unwrap();
        assert_eq!(kvs.trigger_put_balanced(&key, "x").unwrap_err(), KvsError::NoWorker);
    }

    #[test]
    fn session_reads_its_writes() {
        let (mut kvs, clock) = store();
        kvs.create_pool("/p", 1, 2).unwrap();
        let key = k("/p/x");
        let mut session = Session::new();
        clock.set(1);
        session.put(&mut kvs, &key, "a").unwrap();
        assert_eq!(session.get(&kvs, &key).unwrap().payload, Bytes::from("a"));
        let shard = kvs.shard_of(&key).unwrap();
        let lag = kvs.members(shard).unwrap()[1];
        kvs.hold_acks(shard, lag, true).unwrap();
        session.put(&mut kvs, &key, "b").unwrap();
        assert!(matches!(session.get(&kvs, &key), Err(KvsError::NotStable(_))));
    }

    #[test]
    fn groups_fetch_and_evict_together() {
        let (mut kvs, _) = store();
        kvs.create_pool("/p", 2, 1).unwrap();
        let (a, b) = (k("/p/a"), k("/p/b"));
        kvs.create_affinity_group("g", &[a.clone(), b.clone()]).unwrap();
        kvs.put(&a, "A").unwrap();
        kvs.put(&b, "B").unwrap();
        assert_eq!(kvs.fetch_group("g", 5).unwrap().len(), 2);
        assert_eq!(kvs.cached_keys(5), vec![a.clone(), b.clone()]);
        kvs.evict_group("g", 5);
        assert!(kvs.cached_keys(5).is_empty());
        kvs.create_pool("/q", 1, 1).unwrap();
        assert!(kvs.create_affinity_group("h", &[k("/p/c"), k("/q/c")]).is_err());
    }

    #[test]
    fn event_log_csv_header() {
        let (mut kvs, _) = store();
        kvs.create_pool("/p", 1, 1).unwrap();
        kvs.put(&k("/p/x"), "a").unwrap();
        let mut buf = Vec::new();
        kvs.write_event_log_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "shard_id,replica_id,seq,op,key,version,ts_us");
        assert!(lines.next().unwrap().contains(",put,/p/x,1,"));
    }
}
