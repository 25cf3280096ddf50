use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::link::{LinkModel, Topology};
use crate::bridge::BridgeConfig;
use crate::mesh::{MeshAddress, MeshConfig};
use crate::p2p::HostConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A placement of one mesh node.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub unicast: u16,
    /// Meters, 2-D.
    #[serde(default)]
    pub position: [f64; 2],
    #[serde(default = "default_groups")]
    pub groups: Vec<u16>,
}

fn default_groups() -> Vec<u16> {
    vec![MeshConfig::default().discovery_group.0]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub base_latency_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub loss_p: f64,
    #[serde(default = "infinite")]
    pub max_range_m: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sender: String,
    pub receiver: String,
}

/// Scripted departure and/or return of a node, in seconds of virtual time.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub node: String,
    #[serde(default)]
    pub leave_at_s: Option<f64>,
    #[serde(default)]
    pub join_at_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_packet_count")]
    pub packet_count: u32,
    #[serde(default = "default_send_interval")]
    pub send_interval_s: f64,
    /// Liveness probe period; 0 disables probing.
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: f64,
    #[serde(default = "default_message_size")]
    pub message_size_bytes: usize,
    #[serde(default = "default_topic")]
    pub topic: String,
    /// Extra virtual time after the last publish before the run stops.
    #[serde(default = "default_drain")]
    pub drain_s: f64,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub host: HostConfig,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
}

fn default_packet_count() -> u32 {
    100
}
fn default_send_interval() -> f64 {
    9.0
}
fn default_keep_alive() -> f64 {
    540.0
}
fn default_message_size() -> usize {
    2000
}
fn default_topic() -> String {
    "oec/telemetry".to_string()
}
fn default_drain() -> f64 {
    60.0
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.send_interval_s.is_nan() || self.send_interval_s <= 0.0 {
            return invalid("send_interval_s must be positive".into());
        }
        if self.keep_alive_s < 0.0 || self.drain_s < 0.0 {
            return invalid("keep_alive_s and drain_s must be non-negative".into());
        }
        self.mesh.validate().map_err(ConfigError::Invalid)?;
        let mut names = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return invalid(format!("duplicate node name {}", node.name));
            }
            if !MeshAddress(node.unicast).is_unicast() || !addrs.insert(node.unicast) {
                return invalid(format!("node {} has an invalid or duplicate unicast address", node.name));
            }
            if let Some(g) = node.groups.iter().find(|g| !MeshAddress(**g).is_group()) {
                return invalid(format!("node {} lists non-group address 0x{g:04X}", node.name));
            }
        }
        for link in &self.links {
            for end in [&link.a, &link.b] {
                if self.node(end).is_none() {
                    return invalid(format!("link references unknown node {end}"));
                }
            }
            if link.a == link.b {
                return invalid(format!("link from {} to itself", link.a));
            }
            self.link_model(link).validate().map_err(ConfigError::Invalid)?;
        }
        for name in [&self.experiment.sender, &self.experiment.receiver] {
            if self.node(name).is_none() {
                return invalid(format!("experiment references unknown node {name}"));
            }
        }
        if self.experiment.sender == self.experiment.receiver {
            return invalid("sender and receiver must differ".into());
        }
        for c in &self.churn {
            if self.node(&c.node).is_none() {
                return invalid(format!("churn references unknown node {}", c.node));
            }
            if let (Some(leave), Some(join)) = (c.leave_at_s, c.join_at_s) {
                if join < leave {
                    return invalid(format!("churn for {} rejoins before leaving", c.node));
                }
            }
        }
        Ok(())
    }

    fn link_model(&self, link: &LinkSpec) -> LinkModel {
        let distance_m = match (self.node(&link.a), self.node(&link.b)) {
            (Some(a), Some(b)) => {
                let dx = a.position[0] - b.position[0];
                let dy = a.position[1] - b.position[1];
                (dx * dx + dy * dy).sqrt()
            }
            _ => 0.0,
        };
        LinkModel {
            base_latency_ms: link.base_latency_ms,
            jitter_ms: link.jitter_ms,
            loss_p: link.loss_p,
            max_range_m: link.max_range_m,
            distance_m,
        }
    }

    /// Link table over unicast addresses, distances taken from positions.
    pub fn topology(&self) -> Topology {
        let mut topo = Topology::new();
        for link in &self.links {
            let a = self.node(&link.a).expect("validated").unicast;
            let b = self.node(&link.b).expect("validated").unicast;
            topo.connect(a, b, self.link_model(link));
        }
        topo
    }
}
