//! Deployment configuration: one JSON document, with profiles, pipeline and
//! workload optionally included by path relative to the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sloserve::bench::{ResizePlan, SloTarget, WorkloadSpec};
use sloserve::elasticity::Thresholds;
use sloserve::executor::{InstanceId, MigLayout, ProfileSet, DEFAULT_GPU_GB};
use sloserve::planner::{monolithic_baseline, plan, validate, with_throughput, ComponentSpec, Placement, PlacementProblem, PlanError};
use sloserve::runtime::{PipelineSpec, RuntimeConfig};

use crate::CliError;

/// A value given inline or as a path to a JSON file holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Include<T> {
    Path(String),
    Inline(T),
}

impl<T: DeserializeOwned + Clone> Include<T> {
    pub fn resolve(&self, base: &Path) -> Result<T, CliError> {
        match self {
            Include::Inline(v) => Ok(v.clone()),
            Include::Path(p) => {
                let path = base.join(p);
                let text = read(&path)?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Virtual time advances as fast as the event queue allows.
    #[default]
    Simulate,
    /// Virtual time follows the wall clock.
    Live,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Simulate => "simulate",
            Mode::Live => "live",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub nodes: u32,
    #[serde(default = "default_gpu_gb")]
    pub gpu_gb: u32,
    #[serde(default = "MigLayout::standard")]
    pub layouts: Vec<MigLayout>,
    #[serde(default = "default_host_workers")]
    pub host_workers: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticityConfig {
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Partitioned but unassigned instances the controller may grow into.
    #[serde(default)]
    pub standby: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    pub cluster: ClusterConfig,
    /// Path to the profile CSV.
    pub profiles: String,
    pub pipeline: Include<PipelineSpec>,
    /// `auto`, `monolithic`, or a path to a placement JSON.
    #[serde(default = "default_placement")]
    pub placement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elasticity: Option<ElasticityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<Include<WorkloadSpec>>,
    #[serde(default = "SloTarget::defaults")]
    pub slo: Vec<SloTarget>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<ResizePlan>,
    /// Offered rates for a load sweep; each replaces every phase's rate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_qps: Vec<f64>,
    /// Listen address for `serve`; required in live mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
}

fn default_gpu_gb() -> u32 {
    DEFAULT_GPU_GB
}

fn default_host_workers() -> u32 {
    2
}

fn default_placement() -> String {
    "auto".into()
}

fn default_seed() -> u64 {
    1
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl DeploymentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A config with every include resolved and checked.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub config: DeploymentConfig,
    pub base: PathBuf,
    pub profiles: ProfileSet,
    pub pipeline: PipelineSpec,
    pub problem: PlacementProblem,
    pub workload: Option<WorkloadSpec>,
}

impl Deployment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config = DeploymentConfig::parse(&read(path)?)?;
        Self::resolve(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(config: DeploymentConfig, base: &Path) -> Result<Self, CliError> {
        let cfg_err = |m: String| CliError::Config(m);
        let csv_path = base.join(&config.profiles);
        let profiles = ProfileSet::from_csv_str(&read(&csv_path)?).map_err(|e| cfg_err(format!("{}: {e}", csv_path.display())))?;
        let pipeline = config.pipeline.resolve(base)?;
        pipeline.validate().map_err(|e| cfg_err(format!("pipeline: {e}")))?;
        for l in &config.cluster.layouts {
            l.validate(config.cluster.gpu_gb).map_err(|e| cfg_err(format!("layout {l}: {e}")))?;
        }
        let mut workload = config.workload.as_ref().map(|w| w.resolve(base)).transpose()?;
        if let Some(w) = &mut workload {
            w.seed = config.seed;
            if w.pipeline != pipeline.name {
                return Err(cfg_err(format!("workload targets pipeline {:?}, config defines {:?}", w.pipeline, pipeline.name)));
            }
            w.validate().map_err(|e| cfg_err(format!("workload: {e}")))?;
        }
        for s in &config.slo {
            if !(s.latency_ms > 0.0) {
                return Err(cfg_err(format!("slo latency must be positive, got {}", s.latency_ms)));
            }
        }
        if config.mode == Mode::Live && config.listen.is_none() {
            return Err(cfg_err("live mode needs a listen address".into()));
        }
        let components = pipeline
            .stages
            .iter()
            .map(|s| ComponentSpec {
                id: s.id.clone(),
                model: s.model.clone(),
                max_batch: Some(s.max_batch),
            })
            .collect();
        let problem = PlacementProblem::new(config.cluster.nodes, config.cluster.gpu_gb, config.cluster.layouts.clone(), components, profiles.clone());
        Ok(Self {
            config,
            base: base.to_path_buf(),
            profiles,
            pipeline,
            problem,
            workload,
        })
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            seed: self.config.seed,
            ..self.config.runtime.clone()
        }
    }

    /// Resolves the placement choice; infeasible or invalid placements map to
    /// [`CliError::Infeasible`].
    pub fn placement(&self) -> Result<Placement, CliError> {
        let infeasible = |e: PlanError| match e {
            PlanError::Infeasible(m) => CliError::Infeasible(vec![m]),
            PlanError::InvalidPlacement(v) => CliError::Infeasible(v.iter().map(ToString::to_string).collect()),
            other => CliError::Config(other.to_string()),
        };
        match self.config.placement.as_str() {
            "auto" => plan(&self.problem).map_err(infeasible),
            "monolithic" => monolithic_baseline(&self.problem).map_err(infeasible),
            path => {
                let path = self.base.join(path);
                let p = Placement::from_json(&read(&path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let violations = validate(&p, &self.problem);
                if !violations.is_empty() {
                    return Err(CliError::Infeasible(violations.iter().map(ToString::to_string).collect()));
                }
                Ok(with_throughput(p, &self.problem))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"cluster":{"nodes":2},"profiles":"p.csv","pipeline":"pipe.json"}"#;

    #[test]
    fn defaults_fill_in() {
        let c = DeploymentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.cluster.gpu_gb, 24);
        assert_eq!(c.cluster.layouts.len(), 4);
        assert_eq!(c.placement, "auto");
        assert_eq!(c.mode, Mode::Simulate);
        assert_eq!(c.slo.len(), 2);
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn round_trip_is_identity() {
        let full = r#"{"cluster":{"nodes":3,"gpu_gb":24,"layouts":[[24],[6,6,6,6]],"host_workers":4},
            "profiles":"p.csv",
            "pipeline":{"name":"x","stages":[{"id":"a","model":"M","max_batch":4}],"edges":[],"ingress":"a","egress":"a"},
            "placement":"monolithic",
            "elasticity":{"thresholds":{"preload":0.6},"standby":[{"node":2,"slot":0}]},
            "workload":{"pipeline":"x","phases":[{"queries":10,"rate_qps":5.0}]},
            "slo":[{"latency_ms":12.5,"allowed_miss_rate":0.01}],
            "mode":"live","seed":9,"runtime":{"net_jitter_us":0},
            "resize":{"model":"M","instances":[{"node":2,"slot":0}],"at_query":5,"preload":true},
            "sweep_qps":[1.0,2.0],"listen":"127.0.0.1:0"}"#;
        for text in [MINIMAL, full] {
            let a = DeploymentConfig::parse(text).unwrap();
            let b = DeploymentConfig::parse(&a.to_json()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = DeploymentConfig::parse(r#"{"cluster":{"nodes":1},"profiles":"p","pipeline":"q","color":1}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn missing_include_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = DeploymentConfig::parse(MINIMAL).unwrap();
        let err = Deployment::resolve(c, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("p.csv")));
    }
}
