//! Experiment configuration file (TOML).
//!
//! Every key is optional except `[[models]]`, `[schedule]` and exactly one
//! of `[autoscaler]` / `static_replicas`. Unknown keys are rejected.

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use gpufleet_core::gateway::ExternalMetricLimit;
use gpufleet_core::{
    AutoscalerConfig, ClientSpec, CoreError, FleetPolicy, GatewayConfig, Jitter, ModelProfile, Phase, PhaseSchedule,
    SimConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl ToString) -> Self {
        ConfigError::Invalid { key: key.to_string(), reason: reason.to_string() }
    }

    /// The offending key, when one is known.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Virtual,
    #[value(name = "wallclock")]
    #[serde(alias = "wall-clock")]
    Wallclock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub static_replicas: Option<u32>,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub network: NetworkSection,
    pub autoscaler: Option<AutoscalerSection>,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub wallclock: WallclockSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(with = "humantime_serde")]
    pub base_time: Duration,
    #[serde(with = "humantime_serde", default)]
    pub per_item_time: Duration,
    /// Lognormal sigma of the multiplicative service-time jitter; 0 disables it.
    #[serde(default)]
    pub jitter_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySection {
    pub auth_enabled: bool,
    pub tokens: Vec<String>,
    pub max_concurrent_connections: usize,
    pub external_metric_limit: Option<ExternalMetricLimit>,
    pub listen: SocketAddr,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            auth_enabled: false,
            tokens: Vec::new(),
            max_concurrent_connections: 1000,
            external_metric_limit: None,
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    #[serde(with = "humantime_serde")]
    pub startup_delay: Duration,
    pub queue_capacity: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection { startup_delay: Duration::from_secs(10), queue_capacity: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// One-way client <-> gateway delay.
    #[serde(with = "humantime_serde")]
    pub delay: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoscalerSection {
    #[serde(with = "humantime_serde")]
    pub target_queue_latency: Duration,
    pub min_replicas: u32,
    pub max_replicas: u32,
    #[serde(with = "humantime_serde")]
    pub poll_interval: Duration,
    pub tolerance: f64,
    #[serde(with = "humantime_serde")]
    pub downscale_stabilization: Duration,
    #[serde(with = "humantime_serde")]
    pub metric_window: Duration,
}

impl Default for AutoscalerSection {
    fn default() -> Self {
        AutoscalerConfig::default().into()
    }
}

impl From<AutoscalerConfig> for AutoscalerSection {
    fn from(c: AutoscalerConfig) -> Self {
        AutoscalerSection {
            target_queue_latency: c.target_queue_latency,
            min_replicas: c.min_replicas,
            max_replicas: c.max_replicas,
            poll_interval: c.poll_interval,
            tolerance: c.tolerance,
            downscale_stabilization: c.downscale_stabilization,
            metric_window: c.metric_window,
        }
    }
}

impl From<&AutoscalerSection> for AutoscalerConfig {
    fn from(s: &AutoscalerSection) -> Self {
        AutoscalerConfig {
            target_queue_latency: s.target_queue_latency,
            min_replicas: s.min_replicas,
            max_replicas: s.max_replicas,
            poll_interval: s.poll_interval,
            tolerance: s.tolerance,
            downscale_stabilization: s.downscale_stabilization,
            metric_window: s.metric_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub model: String,
    #[serde(default = "default_batch")]
    pub batch_size: u32,
    #[serde(with = "humantime_serde", default = "default_think")]
    pub think_time: Duration,
    #[serde(default)]
    pub token: String,
    #[serde(default)]
    pub payload_size: u32,
    pub phases: Vec<PhaseConfig>,
}

fn default_batch() -> u32 {
    10
}

fn default_think() -> Duration {
    Duration::from_millis(50)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(with = "humantime_serde")]
    pub duration: Duration,
    pub clients: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(with = "humantime_serde")]
    pub sample_interval: Duration,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { sample_interval: Duration::from_secs(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallclockSection {
    /// Virtual seconds per real second.
    pub time_scale: f64,
    /// Address for the `/metrics` endpoint; unset disables it.
    pub metrics_listen: Option<SocketAddr>,
}

impl Default for WallclockSection {
    fn default() -> Self {
        WallclockSection { time_scale: 20.0, metrics_listen: None }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.autoscaler, self.static_replicas) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid("static_replicas", "set together with [autoscaler]; choose one"))
            }
            (None, None) => return Err(ConfigError::invalid("autoscaler", "one of [autoscaler] or static_replicas is required")),
            (None, Some(0)) => return Err(ConfigError::invalid("static_replicas", "must be >= 1")),
            _ => {}
        }
        if let Some(a) = &self.autoscaler {
            AutoscalerConfig::from(a).validate().map_err(|e| ConfigError::invalid(autoscaler_key(a), e))?;
        }
        if self.models.is_empty() {
            return Err(ConfigError::invalid("models", "at least one model is required"));
        }
        for (i, m) in self.models.iter().enumerate() {
            self.model_profile(m).map_err(|e| ConfigError::invalid(&format!("models[{i}]"), e))?;
        }
        if !self.models.iter().any(|m| m.name == self.schedule.model) {
            return Err(ConfigError::invalid("schedule.model", format!("no model named `{}`", self.schedule.model)));
        }
        if self.schedule.batch_size == 0 {
            return Err(ConfigError::invalid("schedule.batch_size", "must be >= 1"));
        }
        if self.schedule.phases.is_empty() {
            return Err(ConfigError::invalid("schedule.phases", "at least one phase is required"));
        }
        for (i, p) in self.schedule.phases.iter().enumerate() {
            if p.duration.is_zero() {
                return Err(ConfigError::invalid(&format!("schedule.phases[{i}].duration"), "must be > 0"));
            }
        }
        if self.gateway.max_concurrent_connections == 0 {
            return Err(ConfigError::invalid("gateway.max_concurrent_connections", "must be >= 1"));
        }
        if self.gateway.auth_enabled && self.gateway.tokens.is_empty() {
            return Err(ConfigError::invalid("gateway.tokens", "auth is enabled but no tokens are configured"));
        }
        if let Some(limit) = &self.gateway.external_metric_limit {
            if limit.metric != gpufleet_core::sim::AVG_QUEUE_LATENCY_METRIC {
                return Err(ConfigError::invalid("gateway.external_metric_limit.metric", format!("unknown metric `{}`", limit.metric)));
            }
        }
        if self.backend.queue_capacity == 0 {
            return Err(ConfigError::invalid("backend.queue_capacity", "must be >= 1"));
        }
        if self.output.sample_interval.is_zero() {
            return Err(ConfigError::invalid("output.sample_interval", "must be > 0"));
        }
        if !(self.wallclock.time_scale.is_finite() && self.wallclock.time_scale > 0.0) {
            return Err(ConfigError::invalid("wallclock.time_scale", "must be a positive number"));
        }
        Ok(())
    }

    fn model_profile(&self, m: &ModelConfig) -> Result<ModelProfile, CoreError> {
        let jitter = if m.jitter_sigma == 0.0 { Jitter::None } else { Jitter::LogNormal { sigma: m.jitter_sigma } };
        ModelProfile::new(m.name.clone(), m.base_time, m.per_item_time, jitter)
    }

    pub fn model_profiles(&self) -> Vec<ModelProfile> {
        self.models.iter().map(|m| self.model_profile(m).expect("validated")).collect()
    }

    pub fn fleet_policy(&self) -> FleetPolicy {
        match (&self.autoscaler, self.static_replicas) {
            (Some(a), _) => FleetPolicy::Autoscaled(a.into()),
            (None, Some(n)) => FleetPolicy::Static { replicas: n },
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            auth_enabled: self.gateway.auth_enabled,
            valid_tokens: self.gateway.tokens.iter().map(|t| t.as_bytes().to_vec()).collect(),
            max_concurrent_connections: self.gateway.max_concurrent_connections,
            external_metric_limit: self.gateway.external_metric_limit.clone(),
            listen_address: Some(self.gateway.listen.to_string()),
        }
    }

    pub fn phase_schedule(&self) -> PhaseSchedule {
        let s = &self.schedule;
        PhaseSchedule {
            phases: s.phases.iter().map(|p| Phase { duration: p.duration, clients: p.clients }).collect(),
            client: ClientSpec {
                model: s.model.clone(),
                batch_size: s.batch_size,
                think_time: s.think_time,
                token: s.token.as_bytes().to_vec(),
                payload_size: s.payload_size,
            },
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut cfg = SimConfig::new(self.model_profiles(), self.fleet_policy(), self.phase_schedule());
        cfg.seed = self.seed;
        cfg.gateway = self.gateway_config();
        cfg.startup_delay = self.backend.startup_delay;
        cfg.queue_capacity = self.backend.queue_capacity;
        cfg.network_delay = self.network.delay;
        cfg.sample_interval = self.output.sample_interval;
        cfg
    }

    /// Same experiment with a fixed fleet of `replicas`.
    pub fn with_static(&self, replicas: u32) -> Self {
        ExperimentConfig { static_replicas: Some(replicas), autoscaler: None, ..self.clone() }
    }

    /// The 1 -> 10 -> 1 client experiment on the default calibrated model.
    pub fn reference() -> Self {
        Self::parse(REFERENCE_TOML).expect("reference config is valid")
    }
}

fn autoscaler_key(a: &AutoscalerSection) -> &'static str {
    if a.min_replicas == 0 || a.min_replicas > a.max_replicas {
        "autoscaler.min_replicas"
    } else if !(0.0..1.0).contains(&a.tolerance) {
        "autoscaler.tolerance"
    } else if a.target_queue_latency.is_zero() {
        "autoscaler.target_queue_latency"
    } else if a.poll_interval.is_zero() {
        "autoscaler.poll_interval"
    } else {
        "autoscaler"
    }
}

pub const REFERENCE_TOML: &str = include_str!("../../../config/default.toml");
