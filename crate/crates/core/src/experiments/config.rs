//! Scenario configuration.
//!
//! Configs are TOML documents. Any key can be overridden with a dotted
//! `key=value` pair (for example `network.n_nodes=1000`); the value is parsed
//! as a TOML literal and falls back to a plain string.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{DisturbanceMode, NetworkConfig, MICROS_PER_SECOND};
use crate::protocol::KademliaParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("malformed override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Latency,
    CoverageOffline,
    CoverageRefuse,
    GossipSweep,
    FaultfreeAudit,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Latency => "latency",
            Scenario::CoverageOffline => "coverage_offline",
            Scenario::CoverageRefuse => "coverage_refuse",
            Scenario::GossipSweep => "gossip_sweep",
            Scenario::FaultfreeAudit => "faultfree_audit",
        };
        f.write_str(s)
    }
}

/// Broadcast algorithm under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Kademlia broadcast with uniform relay choice.
    Kademlia,
    /// Kademlia broadcast with neighbor evaluation.
    Ne,
    Gossip,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Kademlia => "kademlia",
            Variant::Ne => "ne",
            Variant::Gossip => "gossip",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub betas: Vec<usize>,
    pub variants: Vec<Variant>,
    pub refusers_confirm: bool,
    /// Gossip fanouts; a value at or above a node's degree floods.
    pub fanouts: Vec<usize>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            betas: vec![1, 2, 3, 4],
            variants: vec![Variant::Kademlia, Variant::Ne],
            refusers_confirm: true,
            fanouts: vec![1, 2, 3, 4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub interval_ms: u64,
    pub rounds_per_node: usize,
    /// Total broadcasts; defaults to `rounds_per_node * n_nodes`.
    pub broadcasts: Option<usize>,
    /// Simulated-time cutoff in seconds; unset runs until the queue drains.
    pub horizon_s: Option<u64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { interval_ms: 50, rounds_per_node: 10, broadcasts: None, horizon_s: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSection {
    /// Modes for the offline-coverage scenario.
    pub modes: Vec<DisturbanceMode>,
    pub period_s: u64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        DisturbanceSection {
            modes: vec![DisturbanceMode::ChurnOnce, DisturbanceMode::ChurnPeriodic],
            period_s: 60,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub event_log: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

fn default_repeats() -> usize {
    3
}

impl ScenarioConfig {
    /// Desk-scale defaults: 200 nodes, 16-bit ids, 10 rounds per node, 3 repeats.
    pub fn desk(scenario: Scenario) -> Self {
        let mut config = ScenarioConfig {
            scenario,
            seed: default_seed(),
            repeats: default_repeats(),
            network: NetworkConfig::default(),
            protocol: ProtocolSection::default(),
            schedule: ScheduleSection::default(),
            disturbance: DisturbanceSection::default(),
            output: OutputSection::default(),
        };
        match scenario {
            Scenario::Latency => {
                config.schedule.interval_ms = 2;
                config.protocol.betas = vec![2];
            }
            Scenario::GossipSweep => {
                config.protocol.variants = vec![Variant::Gossip];
                config.repeats = 5;
                config.schedule.rounds_per_node = 1;
            }
            Scenario::FaultfreeAudit => {
                config.protocol.betas = vec![1];
                config.protocol.variants = vec![Variant::Kademlia];
                config.repeats = 1;
                config.schedule.rounds_per_node = 1;
            }
            _ => {}
        }
        config
    }

    /// 1000 nodes and 5 repeats, as in the full-size experiments.
    pub fn full_scale(scenario: Scenario) -> Self {
        let mut config = Self::desk(scenario);
        config.network.n_nodes = 1000;
        if scenario != Scenario::FaultfreeAudit {
            config.repeats = 5;
        }
        config
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value =
            text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ScenarioConfig =
            value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn broadcasts(&self) -> usize {
        self.schedule.broadcasts.unwrap_or(self.schedule.rounds_per_node * self.network.n_nodes)
    }

    pub fn interval_us(&self) -> u64 {
        self.schedule.interval_ms * 1_000
    }

    pub fn horizon_us(&self) -> Option<u64> {
        self.schedule.horizon_s.map(|s| s * MICROS_PER_SECOND)
    }

    pub fn kademlia_params(&self, beta: usize, ne: bool) -> KademliaParams {
        KademliaParams {
            beta,
            ne_enabled: ne,
            refusers_confirm: self.protocol.refusers_confirm,
            confirm_bytes: self.network.confirm_msg_bytes,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate().map_err(|e| match e {
            crate::netsim::SimError::Config { field, reason } => invalid(&format!("network.{field}"), reason),
            other => invalid("network", other.to_string()),
        })?;
        if self.repeats == 0 {
            return Err(invalid("repeats", "must be at least 1"));
        }
        if self.scenario == Scenario::GossipSweep {
            if self.protocol.fanouts.is_empty() || self.protocol.fanouts.contains(&0) {
                return Err(invalid("protocol.fanouts", "need at least one positive fanout"));
            }
        } else {
            if self.protocol.betas.is_empty() || self.protocol.betas.contains(&0) {
                return Err(invalid("protocol.betas", "need at least one positive beta"));
            }
            if self.protocol.variants.is_empty() {
                return Err(invalid("protocol.variants", "need at least one variant"));
            }
            if self.protocol.variants.contains(&Variant::Gossip) {
                return Err(invalid("protocol.variants", "gossip only runs in the gossip_sweep scenario"));
            }
        }
        if self.broadcasts() == 0 {
            return Err(invalid("schedule.rounds_per_node", "no broadcasts would be scheduled"));
        }
        if self.scenario == Scenario::CoverageOffline {
            if self.disturbance.modes.is_empty() {
                return Err(invalid("disturbance.modes", "need at least one churn mode"));
            }
            if self
                .disturbance
                .modes
                .iter()
                .any(|m| !matches!(m, DisturbanceMode::ChurnOnce | DisturbanceMode::ChurnPeriodic))
            {
                return Err(invalid(
                    "disturbance.modes",
                    "offline coverage takes churn_once or churn_periodic",
                ));
            }
            if self.disturbance.period_s == 0 {
                return Err(invalid("disturbance.period_s", "must be positive"));
            }
        }
        if self.scenario == Scenario::FaultfreeAudit && self.protocol.betas != [1] {
            return Err(invalid("protocol.betas", "the fault-free audit runs with beta = 1"));
        }
        Ok(())
    }

    /// Disturbance modes this scenario iterates over.
    pub fn modes(&self) -> Vec<DisturbanceMode> {
        match self.scenario {
            Scenario::CoverageOffline => self.disturbance.modes.clone(),
            Scenario::CoverageRefuse => vec![DisturbanceMode::RefuseHalf],
            _ => vec![DisturbanceMode::None],
        }
    }
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node.as_table_mut().ok_or_else(|| invalid(key, "path runs through a non-table value"))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split yields at least one part")
}
