//! Config ingestion: strict JSON schemas for tree specifications.
//!
//! Three `kind`s are accepted: `"explicit-tree"` (node list with explicit
//! branch probabilities), `"binomial"` (a geometric-Brownian lattice built
//! from a continuous model spec), and `"regime"` (a regime-switching-drift
//! lattice). Unknown keys are fatal everywhere — misspelled financial
//! parameters must not be silently ignored.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcmvError};
use crate::model::{self, ContinuousModelSpec};
use crate::tree::{EventTree, NodeId, TreeBuilder};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChildConfig {
    /// Index into the `nodes` array; must lie in the next level.
    pub id: u32,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub level: usize,
    pub price: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ChildConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExplicitTreeConfig {
    /// Always `"explicit-tree"`.
    pub kind: String,
    pub horizon: usize,
    #[serde(default)]
    pub recombining: bool,
    /// Node ids are positions in this array; nodes must be listed in level
    /// order starting with the single root.
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelTreeConfig {
    /// `"binomial"` or `"regime"`.
    pub kind: String,
    /// Number of trading dates (lattice steps).
    pub horizon: usize,
    #[serde(default = "default_true")]
    pub recombining: bool,
    pub spec: ContinuousModelSpec,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(untagged)]
pub enum TreeConfig {
    Explicit(ExplicitTreeConfig),
    Model(ModelTreeConfig),
}

fn from_value_strict<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| TcmvError::Config(e.to_string()))
}

/// Parses and validates a config document; unknown keys and unknown `kind`
/// values are rejected with the offending key in the message.
pub fn parse_config(text: &str) -> Result<TreeConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| TcmvError::Config(format!("malformed JSON: {e}")))?;
    let kind = value
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| TcmvError::Config("missing or non-string top-level key `kind`".into()))?;
    match kind {
        "explicit-tree" => Ok(TreeConfig::Explicit(from_value_strict(value)?)),
        "binomial" | "regime" => Ok(TreeConfig::Model(from_value_strict(value)?)),
        other => Err(TcmvError::Config(format!(
            "unknown kind `{other}` (expected explicit-tree | binomial | regime)"
        ))),
    }
}

pub fn load_config(path: &Path) -> Result<TreeConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TcmvError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn build_explicit(cfg: &ExplicitTreeConfig) -> Result<EventTree> {
    if cfg.nodes.is_empty() {
        return Err(TcmvError::Config("`nodes` must not be empty".into()));
    }
    let mut b = TreeBuilder::new();
    let mut current_level = 0usize;
    b.start_level();
    for (i, node) in cfg.nodes.iter().enumerate() {
        if node.level != current_level {
            if node.level != current_level + 1 {
                return Err(TcmvError::Config(format!(
                    "node {i} at level {} follows level {current_level}; \
                     nodes must be listed in level order without gaps",
                    node.level
                )));
            }
            current_level = node.level;
            b.start_level();
        }
        let children: Vec<(NodeId, f64)> = node
            .children
            .iter()
            .map(|c| {
                if (c.id as usize) >= cfg.nodes.len() {
                    Err(TcmvError::Config(format!(
                        "node {i} references child id {} outside `nodes`",
                        c.id
                    )))
                } else {
                    Ok((c.id, c.prob))
                }
            })
            .collect::<Result<_>>()?;
        b.push_node(node.price, &children);
    }
    if current_level != cfg.horizon {
        return Err(TcmvError::Config(format!(
            "declared horizon {} but nodes reach level {current_level}",
            cfg.horizon
        )));
    }
    b.finish(cfg.recombining)
}

fn build_model(cfg: &ModelTreeConfig) -> Result<EventTree> {
    if cfg.horizon < 1 {
        return Err(TcmvError::Config("horizon must be ≥ 1".into()));
    }
    cfg.spec.validate()?;
    match (cfg.kind.as_str(), &cfg.spec) {
        ("binomial", ContinuousModelSpec::GeometricBrownian { mu, sigma, s0, t_real }) => {
            if cfg.recombining {
                model::build_binomial(&cfg.spec, cfg.horizon)
            } else {
                if cfg.horizon > 24 {
                    return Err(TcmvError::Config(format!(
                        "non-recombining binomial storage needs 2^{} nodes; \
                         use `recombining: true` beyond 24 steps",
                        cfg.horizon + 1
                    )));
                }
                let dt = t_real / cfg.horizon as f64;
                let u = (sigma * dt.sqrt()).exp();
                let p = model::up_probability(*mu, *sigma, dt)?;
                Ok(crate::fixtures::multiplicative(*s0, u, 1.0 / u, p, cfg.horizon))
            }
        }
        ("binomial", _) => Err(TcmvError::Config(
            "kind `binomial` requires a `geometric-brownian` spec".into(),
        )),
        ("regime", ContinuousModelSpec::RegimeSwitchingDrift { .. }) => {
            if !cfg.recombining {
                return Err(TcmvError::UnsupportedSpec(
                    "regime trees are only available in recombining storage".into(),
                ));
            }
            model::build_regime_lattice(&cfg.spec, cfg.horizon)
        }
        ("regime", _) => Err(TcmvError::Config(
            "kind `regime` requires a `regime-switching-drift` spec".into(),
        )),
        (other, _) => Err(TcmvError::Config(format!("unknown kind `{other}`"))),
    }
}

pub fn build_from_config(cfg: &TreeConfig) -> Result<EventTree> {
    match cfg {
        TreeConfig::Explicit(c) => build_explicit(c),
        TreeConfig::Model(c) => build_model(c),
    }
}
