//! Scenario configuration: JSON schema, defaults, overrides, validation.

use std::fmt;
use std::path::Path;

use mixfed_core::learning::TaskSpec;
use mixfed_core::mixer::MixConfig;
use mixfed_core::node::{LearnConfig, NodeConfig};
use mixfed_core::onion::PacketFormat;
use mixfed_core::overlay::OverlayConfig;
use mixfed_core::{Nanos, NodeId};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u64,
    pub n_nodes: usize,
    pub mix: MixSection,
    pub route: RouteSection,
    pub learn: LearnSection,
    pub overlay: OverlaySection,
    pub transport: TransportSection,
    pub adversary: AdversarySection,
    pub churn: Vec<ChurnStep>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            version: 1,
            n_nodes: 6,
            mix: MixSection::default(),
            route: RouteSection::default(),
            learn: LearnSection::default(),
            overlay: OverlaySection::default(),
            transport: TransportSection::default(),
            adversary: AdversarySection::default(),
            churn: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub outbox_size: usize,
    pub mu_s: f64,
    pub sigma_s: f64,
    pub shuffle: bool,
    pub cover: bool,
}

impl Default for MixSection {
    fn default() -> Self {
        let d = MixConfig::default();
        MixSection {
            outbox_size: d.outbox_size,
            mu_s: d.mu_s,
            sigma_s: d.sigma_s,
            shuffle: d.shuffle,
            cover: d.cover,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSection {
    #[serde(rename = "K_max")]
    pub k_max: usize,
}

impl Default for RouteSection {
    fn default() -> Self {
        RouteSection { k_max: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    pub frag_bytes: usize,
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub alpha_dirichlet: f64,
    pub wait_timeout_s: f64,
    pub quorum_grace_s: f64,
    pub rounds: u32,
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub separation: f64,
    pub samples_per_node: usize,
    pub test_samples: usize,
    /// Number of data partitions; defaults to `n_nodes` plus every node
    /// added by churn. Pin it to compare runs with different churn.
    pub partition_slots: Option<usize>,
}

impl Default for LearnSection {
    fn default() -> Self {
        let task = TaskSpec::default();
        let l = LearnConfig::default();
        LearnSection {
            frag_bytes: l.frag_bytes,
            eta: l.eta,
            tau: l.tau,
            batch_size: l.batch_size,
            alpha_dirichlet: 10.0,
            wait_timeout_s: l.wait_timeout.as_secs_f64(),
            quorum_grace_s: l.quorum_grace.as_secs_f64(),
            rounds: l.rounds,
            classes: task.classes,
            dim: task.dim,
            hidden: 32,
            separation: task.separation,
            samples_per_node: 200,
            test_samples: 1000,
            partition_slots: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlaySection {
    pub heartbeat_interval_s: f64,
    pub heartbeat_timeout_s: f64,
    pub retry_timeout_s: f64,
    pub max_retries: u32,
}

impl Default for OverlaySection {
    fn default() -> Self {
        let o = OverlayConfig::default();
        OverlaySection {
            heartbeat_interval_s: o.heartbeat_interval.as_secs_f64(),
            heartbeat_timeout_s: o.heartbeat_timeout.as_secs_f64(),
            retry_timeout_s: o.retry_timeout.as_secs_f64(),
            max_retries: o.max_retries,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Sim,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub kind: TransportKind,
    pub seed: u64,
    /// One-way link latency in the simulator.
    pub latency_s: f64,
    /// Independent per-frame drop probability in the simulator.
    pub loss: f64,
    /// Period of per-node maintenance (heartbeats, retries, deadlines).
    pub tick_s: f64,
    /// Upper bound on simulated (or, over TCP, wall-clock) time per run.
    pub max_time_s: f64,
    /// TCP listeners bind `base_port + node id`; 0 picks free ports.
    pub base_port: u16,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            kind: TransportKind::Sim,
            seed: 42,
            latency_s: 0.005,
            loss: 0.0,
            tick_s: 0.05,
            max_time_s: 600.0,
            base_port: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub enabled: bool,
    pub n_a: u32,
    pub n_b: u32,
    pub victim: u32,
    pub trials: u64,
    /// Width of the revealed arrival slot, and the adversary's look-back.
    pub window_s: f64,
    /// Traffic before the target is sent.
    pub warmup_s: f64,
    /// Synthetic real messages per second per node; the victim neither
    /// sends nor receives them.
    pub background_rate_hz: f64,
}

impl Default for AdversarySection {
    fn default() -> Self {
        AdversarySection {
            enabled: false,
            n_a: 0,
            n_b: 1,
            victim: 2,
            trials: 500,
            window_s: 0.5,
            warmup_s: 0.5,
            background_rate_hz: 20.0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnAction {
    Kill,
    Add,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnStep {
    /// 1-based round at which the action fires.
    pub at_round: u32,
    pub action: ChurnAction,
    #[serde(default)]
    pub node_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Rejected configuration with one entry per offending field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InvalidConfig {
    pub errors: Vec<FieldError>,
}

impl fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config:")?;
        for e in &self.errors {
            write!(f, " {}: {};", e.field, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for InvalidConfig {}

impl InvalidConfig {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        InvalidConfig {
            errors: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, InvalidConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| InvalidConfig::single("$", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, InvalidConfig> {
        let cfg: ScenarioConfig = serde_json::from_value(value).map_err(|e| InvalidConfig::single("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, InvalidConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InvalidConfig::single("$", format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| InvalidConfig::single("$", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Returns a copy with `key=value` overrides applied and re-validated.
    pub fn with_overrides(&self, overrides: &[&str]) -> Result<Self, InvalidConfig> {
        let mut value = self.to_value();
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, field: &str, message: &str| {
            if !ok {
                errors.push(FieldError {
                    field: field.into(),
                    message: message.into(),
                });
            }
        };
        let positive = |x: f64| x.is_finite() && x > 0.0;
        check(self.version >= 1, "version", "must be at least 1");
        check(self.n_nodes >= 1, "n_nodes", "must be at least 1");
        check(self.n_nodes <= 256, "n_nodes", "at most 256 nodes are supported");
        check(self.mix.outbox_size >= 1, "mix.outbox_size", "must be at least 1");
        check(positive(self.mix.mu_s), "mix.mu_s", "must be positive");
        check(
            self.mix.sigma_s.is_finite() && self.mix.sigma_s >= 0.0,
            "mix.sigma_s",
            "must be non-negative",
        );
        check(
            (1..=3).contains(&self.route.k_max),
            "route.K_max",
            "must be 1, 2 or 3 (a reply block must fit next to a fragment)",
        );
        let l = &self.learn;
        check(l.frag_bytes >= 4, "learn.frag_bytes", "must hold at least one 4-byte element");
        if let Ok(format) = PacketFormat::new(self.route.k_max.clamp(1, 3)) {
            let body = 12 + (l.frag_bytes / 4) * 4;
            check(
                body <= format.max_body_with_surb(),
                "learn.frag_bytes",
                "fragment plus reply block exceeds the packet payload",
            );
        }
        check(positive(l.eta), "learn.eta", "must be positive");
        check(l.tau >= 1, "learn.tau", "must be at least 1");
        check(l.batch_size >= 1, "learn.batch_size", "must be at least 1");
        check(positive(l.alpha_dirichlet), "learn.alpha_dirichlet", "must be positive");
        check(positive(l.wait_timeout_s), "learn.wait_timeout_s", "must be positive");
        check(
            l.quorum_grace_s.is_finite() && l.quorum_grace_s >= 0.0,
            "learn.quorum_grace_s",
            "must be non-negative",
        );
        check(l.rounds >= 1, "learn.rounds", "must be at least 1");
        check(l.classes >= 2, "learn.classes", "must be at least 2");
        check(l.dim >= 1, "learn.dim", "must be at least 1");
        check(positive(l.separation), "learn.separation", "must be positive");
        check(l.samples_per_node >= 1, "learn.samples_per_node", "must be at least 1");
        check(l.test_samples >= 1, "learn.test_samples", "must be at least 1");
        if let Some(s) = l.partition_slots {
            check(
                s >= self.n_nodes + self.added_nodes(),
                "learn.partition_slots",
                "must cover every node, including churn additions",
            );
        }
        let o = &self.overlay;
        check(positive(o.heartbeat_interval_s), "overlay.heartbeat_interval_s", "must be positive");
        check(
            o.heartbeat_timeout_s > o.heartbeat_interval_s,
            "overlay.heartbeat_timeout_s",
            "must exceed the heartbeat interval",
        );
        check(positive(o.retry_timeout_s), "overlay.retry_timeout_s", "must be positive");
        let t = &self.transport;
        check(
            t.latency_s.is_finite() && t.latency_s >= 0.0,
            "transport.latency_s",
            "must be non-negative",
        );
        check((0.0..1.0).contains(&t.loss), "transport.loss", "must be in [0, 1)");
        check(positive(t.tick_s), "transport.tick_s", "must be positive");
        check(positive(t.max_time_s), "transport.max_time_s", "must be positive");
        check(
            t.base_port == 0 || usize::from(t.base_port) + self.n_nodes + self.added_nodes() <= 65535,
            "transport.base_port",
            "port range overflows",
        );
        let a = &self.adversary;
        if a.enabled {
            let n = self.n_nodes as u32;
            check(a.n_a != a.n_b, "adversary.n_b", "candidates must differ");
            check(a.n_a < n && a.n_b < n, "adversary.n_a", "candidates must be scenario nodes");
            check(
                a.victim < n && a.victim != a.n_a && a.victim != a.n_b,
                "adversary.victim",
                "victim must be a third scenario node",
            );
            check(a.trials >= 100, "adversary.trials", "at least 100 trials are required");
            check(positive(a.window_s), "adversary.window_s", "must be positive");
        }
        for (i, c) in self.churn.iter().enumerate() {
            check(c.at_round >= 1, &format!("churn[{i}].at_round"), "rounds are numbered from 1");
            if c.action == ChurnAction::Kill {
                check(
                    c.node_id.is_some_and(|id| (id as usize) < self.n_nodes + self.added_nodes()),
                    &format!("churn[{i}].node_id"),
                    "kill needs a known node id",
                );
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(InvalidConfig { errors })
        }
    }

    pub fn added_nodes(&self) -> usize {
        self.churn.iter().filter(|c| c.action == ChurnAction::Add).count()
    }

    pub fn partition_slots(&self) -> usize {
        self.learn
            .partition_slots
            .unwrap_or(self.n_nodes + self.added_nodes())
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            classes: self.learn.classes,
            dim: self.learn.dim,
            separation: self.learn.separation,
        }
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            outbox_size: self.mix.outbox_size,
            mu_s: self.mix.mu_s,
            sigma_s: self.mix.sigma_s,
            shuffle: self.mix.shuffle,
            cover: self.mix.cover,
        }
    }

    pub fn node_config(&self) -> NodeConfig {
        let o = &self.overlay;
        let l = &self.learn;
        NodeConfig {
            version: self.version,
            mix: self.mix_config(),
            overlay: OverlayConfig {
                k_max: self.route.k_max,
                retry_timeout: Nanos::from_secs_f64(o.retry_timeout_s),
                max_retries: o.max_retries,
                heartbeat_interval: Nanos::from_secs_f64(o.heartbeat_interval_s),
                heartbeat_timeout: Nanos::from_secs_f64(o.heartbeat_timeout_s),
            },
            learn: LearnConfig {
                frag_bytes: l.frag_bytes,
                eta: l.eta,
                tau: l.tau,
                batch_size: l.batch_size,
                rounds: l.rounds,
                wait_timeout: Nanos::from_secs_f64(l.wait_timeout_s),
                quorum_grace: Nanos::from_secs_f64(l.quorum_grace_s),
                ..LearnConfig::default()
            },
        }
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n_nodes as u32).map(NodeId)
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON
/// when possible (numbers, booleans, objects) and taken as a string
/// otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), InvalidConfig> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| InvalidConfig::single(spec, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| InvalidConfig::single(key, "path crosses a non-object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(InvalidConfig::single(key, "empty key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ScenarioConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn zero_nodes_rejected_with_field() {
        let err = ScenarioConfig::from_json(r#"{"n_nodes": 0}"#).unwrap_err();
        assert!(err.errors.iter().any(|e| e.field == "n_nodes"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_json(r#"{"mix": {"outbox": 3}}"#).is_err());
    }

    #[test]
    fn overrides_apply_by_path() {
        let cfg = ScenarioConfig::default()
            .with_overrides(&["mix.mu_s=0.01", "route.K_max=3", "transport.kind=tcp"])
            .unwrap();
        assert_eq!(cfg.mix.mu_s, 0.01);
        assert_eq!(cfg.route.k_max, 3);
        assert_eq!(cfg.transport.kind, TransportKind::Tcp);
        assert!(ScenarioConfig::default().with_overrides(&["mix.mu_s"]).is_err());
    }

    #[test]
    fn k_max_four_does_not_fit() {
        let err = ScenarioConfig::default().with_overrides(&["route.K_max=4"]).unwrap_err();
        assert!(err.errors.iter().any(|e| e.field == "route.K_max"));
    }
}
