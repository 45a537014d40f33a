//! Component profiles: per (model, instance size, batch size) latency,
//! throughput and memory, and the latency model derived from them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ExecError;

/// MIG slice sizes, in GB.
pub const MIG_SIZES: [u32; 3] = [6, 12, 24];

/// Size of an execution slot: a MIG slice in GB, or a host-CPU worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstanceSize {
    Gb(u32),
    Host,
}

impl InstanceSize {
    pub fn gb(self) -> Option<u32> {
        match self {
            InstanceSize::Gb(g) => Some(g),
            InstanceSize::Host => None,
        }
    }

    /// Memory capacity; host workers are unbounded.
    pub fn capacity_gb(self) -> f64 {
        match self {
            InstanceSize::Gb(g) => f64::from(g),
            InstanceSize::Host => f64::INFINITY,
        }
    }
}

impl fmt::Display for InstanceSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstanceSize::Gb(g) => write!(f, "{g}"),
            InstanceSize::Host => f.write_str("host"),
        }
    }
}

impl FromStr for InstanceSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("host") {
            return Ok(InstanceSize::Host);
        }
        s.parse::<u32>()
            .ok()
            .filter(|g| *g > 0)
            .map(InstanceSize::Gb)
            .ok_or_else(|| format!("bad instance size {s:?}"))
    }
}

impl Serialize for InstanceSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            InstanceSize::Gb(g) => s.serialize_u32(*g),
            InstanceSize::Host => s.serialize_str("host"),
        }
    }
}

impl<'de> Deserialize<'de> for InstanceSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(g) if g > 0 => Ok(InstanceSize::Gb(g)),
            Raw::N(_) => Err(serde::de::Error::custom("instance size must be positive")),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub size: InstanceSize,
    pub batch: u32,
    pub latency_ms: f64,
    pub throughput_qps: f64,
    pub memory_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub model_id: String,
    pub entries: Vec<ProfileEntry>,
}

impl ComponentProfile {
    fn points(&self, size: InstanceSize) -> Vec<&ProfileEntry> {
        let mut pts: Vec<&ProfileEntry> = self.entries.iter().filter(|e| e.size == size).collect();
        pts.sort_by_key(|e| e.batch);
        pts
    }

    pub fn sizes(&self) -> Vec<InstanceSize> {
        let mut s: Vec<InstanceSize> = self.entries.iter().map(|e| e.size).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Piecewise-linear in batch size over the profiled points, extended
    /// linearly past either end.
    pub fn latency_ms(&self, size: InstanceSize, batch: u32) -> Result<f64, ExecError> {
        let pts = self.points(size);
        let no_profile = || ExecError::NoProfile(self.model_id.clone(), size);
        let first = *pts.first().ok_or_else(no_profile)?;
        if pts.len() == 1 {
            return Ok(first.latency_ms);
        }
        let b = f64::from(batch.max(1));
        let seg = pts
            .windows(2)
            .find(|w| b <= f64::from(w[1].batch))
            .unwrap_or_else(|| &pts[pts.len() - 2..]);
        let (x0, y0) = (f64::from(seg[0].batch), seg[0].latency_ms);
        let (x1, y1) = (f64::from(seg[1].batch), seg[1].latency_ms);
        Ok((y0 + (b - x0) * (y1 - y0) / (x1 - x0)).max(f64::MIN_POSITIVE))
    }

    /// Memory footprint at a size (largest profiled value).
    pub fn memory_gb(&self, size: InstanceSize) -> Option<f64> {
        self.points(size).iter().map(|e| e.memory_gb).reduce(f64::max)
    }

    pub fn fits(&self, size: InstanceSize) -> bool {
        self.memory_gb(size).is_some_and(|r| r <= size.capacity_gb())
    }

    /// Peak profiled throughput at a size over batch sizes up to `max_batch`.
    pub fn peak_throughput(&self, size: InstanceSize, max_batch: Option<u32>) -> Option<f64> {
        let cap = max_batch.unwrap_or(u32::MAX);
        self.points(size)
            .iter()
            .filter(|e| e.batch <= cap)
            .map(|e| e.throughput_qps)
            .reduce(f64::max)
    }

    /// Batch size at which [`Self::peak_throughput`] is reached.
    pub fn peak_batch(&self, size: InstanceSize, max_batch: Option<u32>) -> Option<u32> {
        let cap = max_batch.unwrap_or(u32::MAX);
        let mut best: Option<&ProfileEntry> = None;
        for e in self.points(size).into_iter().filter(|e| e.batch <= cap) {
            if best.is_none_or(|b| e.throughput_qps > b.throughput_qps) {
                best = Some(e);
            }
        }
        best.map(|e| e.batch)
    }
}

/// All known profiles, keyed by model id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    models: BTreeMap<String, ComponentProfile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    model_id: String,
    instance_size_gb: InstanceSize,
    batch_size: u32,
    latency_ms: f64,
    throughput_qps: f64,
    memory_gb: f64,
}

impl ProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, profile: ComponentProfile) {
        self.models.insert(profile.model_id.clone(), profile);
    }

    /// Adds one profiled point, validating it.
    pub fn add_entry(&mut self, model_id: &str, entry: ProfileEntry) -> Result<(), ExecError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if entry.batch == 0 || !positive(entry.latency_ms) || !positive(entry.throughput_qps) || !(entry.memory_gb >= 0.0) {
            return Err(ExecError::BadProfile(format!(
                "{model_id} size {} batch {}: batch, latency and throughput must be positive",
                entry.size, entry.batch
            )));
        }
        self.models
            .entry(model_id.to_string())
            .or_insert_with(|| ComponentProfile {
                model_id: model_id.to_string(),
                entries: Vec::new(),
            })
            .entries
            .push(entry);
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Result<&ComponentProfile, ExecError> {
        self.models
            .get(model_id)
            .ok_or_else(|| ExecError::UnknownModel(model_id.to_string()))
    }

    pub fn models(&self) -> impl Iterator<Item = &ComponentProfile> {
        self.models.values()
    }

    pub fn latency_ms(&self, model_id: &str, size: InstanceSize, batch: u32) -> Result<f64, ExecError> {
        self.get(model_id)?.latency_ms(size, batch)
    }

    /// CSV columns: model_id, instance_size_gb, batch_size, latency_ms, throughput_qps, memory_gb.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, ExecError> {
        let mut set = Self::new();
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
        for row in rd.deserialize::<CsvRow>() {
            let row = row.map_err(|e| ExecError::BadProfile(e.to_string()))?;
            set.add_entry(
                &row.model_id,
                ProfileEntry {
                    size: row.instance_size_gb,
                    batch: row.batch_size,
                    latency_ms: row.latency_ms,
                    throughput_qps: row.throughput_qps,
                    memory_gb: row.memory_gb,
                },
            )?;
        }
        Ok(set)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, ExecError> {
        Self::from_csv(text.as_bytes())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for p in self.models.values() {
            for e in &p.entries {
                w.serialize(CsvRow {
                    model_id: p.model_id.clone(),
                    instance_size_gb: e.size,
                    batch_size: e.batch,
                    latency_ms: e.latency_ms,
                    throughput_qps: e.throughput_qps,
                    memory_gb: e.memory_gb,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Builds a profile from (batch, latency) points; throughput is b / L(b).
    pub fn add_curve(&mut self, model_id: &str, size: InstanceSize, memory_gb: f64, points: &[(u32, f64)]) -> Result<(), ExecError> {
        for &(batch, latency_ms) in points {
            self.add_entry(
                model_id,
                ProfileEntry {
                    size,
                    batch,
                    latency_ms,
                    throughput_qps: f64::from(batch) * 1000.0 / latency_ms,
                    memory_gb,
                },
            )?;
        }
        Ok(())
    }
}
