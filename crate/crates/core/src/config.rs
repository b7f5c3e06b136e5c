//! The run configuration: every tunable of every subcommand in one JSON
//! document, with dotted-path overrides and a content fingerprint.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bpr::BprConfig;
use crate::encoder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::supervision::SupervisionConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SyntheticConfig,
    pub supervision: SupervisionConfig,
    pub embedder: EmbedderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bpr: BprConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `text` (or the defaults when `None`), applies `key=value`
    /// overrides in order and validates the result.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::to_value(Self::from_json(t)?)?,
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.supervision.key_set()?;
        if !(self.supervision.sigma_mm.is_finite() && self.supervision.sigma_mm > 0.0) {
            return Err(Error::Config("supervision.sigma_mm must be positive".into()));
        }
        self.model.validate()?;
        crate::encoder::Embedder::new(self.embedder.clone(), self.model.d, "embed")?;
        self.train.validate()?;
        self.bpr.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered by key, so serializing through `Value`
        // sorts every object.
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// SHA-256 of the canonical JSON.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. The path must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let mut node = &mut *root;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    if node.is_object() {
        return Err(Error::Config(format!("`{path}` is a section, not a key")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Every leaf key of the default configuration with its default value, in
/// key order.
pub fn default_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
