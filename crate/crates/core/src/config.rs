//! Flat `key = value` run configuration.
//!
//! Every key names a leaf field of [`RunConfig`]; leaf names are unique
//! across sections so no prefixes are needed. `#` starts a comment. Later
//! assignments win, so CLI overrides are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Regime, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabFlag {
    Topk,
    Mincount,
    Auto,
}

/// Settings that are neither model shape nor optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub manifest: Option<PathBuf>,
    /// Checkpoint to start from (fine-tune) or to score (evaluate).
    pub checkpoint: Option<PathBuf>,
    pub regime: Regime,
    pub template: u8,
    pub vocab: VocabFlag,
    pub topk: usize,
    pub min_count: usize,
    pub fraction: f64,
    pub shots: usize,
    pub tasks: usize,
    pub split: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            manifest: None,
            checkpoint: None,
            regime: Regime::All,
            template: 3,
            vocab: VocabFlag::Topk,
            topk: 1000,
            min_count: 2,
            fraction: 1.0,
            shots: 0,
            tasks: 1,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::default(), run: RunSettings::default() }
    }
}

fn sections(v: &Value) -> &Map<String, Value> {
    v.as_object().expect("RunConfig serializes to an object")
}

/// Parses `raw` as the type of `current`.
fn parse_value(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match current {
        Value::Bool(_) => match raw {
            "true" | "on" | "1" => Value::Bool(true),
            "false" | "off" | "0" => Value::Bool(false),
            _ => return Err(bad("a boolean")),
        },
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let f = raw.parse::<f64>().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        // Strings, enums and optional paths.
        _ if raw.is_empty() && current.is_null() => Value::Null,
        _ => Value::String(raw.to_string()),
    })
}

/// `key = value` lines of a config file body, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Applies `key=value` assignments in order.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw) in assignments {
            let (key, raw) = (key.trim(), raw.trim());
            let section = sections(&tree)
                .iter()
                .find(|(_, fields)| fields.as_object().is_some_and(|f| f.contains_key(key)))
                .map(|(s, _)| s.clone())
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            let slot = tree[&section].get_mut(key).expect("key found above");
            *slot = parse_value(key, raw, slot)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        self.run.validate()
    }

    /// Parses a config file body.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = parse_pairs(text)?;
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Every leaf as `key = value`, grouped by section; parses back to `self`.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("RunConfig serializes");
        let mut out = String::new();
        for (section, fields) in sections(&tree) {
            let _ = writeln!(out, "# {section}");
            for (k, v) in fields.as_object().expect("sections are objects") {
                let v = match v {
                    Value::String(s) => s.clone(),
                    Value::Null => String::new(),
                    other => other.to_string(),
                };
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.template) {
            return Err(Error::Config(format!("template must be 1..4, got {}", self.template)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be positive".into()));
        }
        if self.tasks > 1 && self.shots == 0 {
            return Err(Error::Config("tasks > 1 needs shots".into()));
        }
        if self.shots > 0 && self.fraction < 1.0 {
            return Err(Error::Config("fraction and shots are mutually exclusive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::MapperKind;
    use std::collections::HashSet;

    #[test]
    fn leaf_keys_are_unique() {
        let tree = serde_json::to_value(RunConfig::default()).unwrap();
        let mut seen = HashSet::new();
        for fields in sections(&tree).values() {
            for k in fields.as_object().unwrap().keys() {
                assert!(seen.insert(k.clone()), "duplicate key {k}");
            }
        }
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("dim = 32  # narrower\nheads=4\nadapters = off\nmapper = linear\n\nbase_lr = 1e-3\nregime = prompts\n")
            .unwrap();
        c.apply([("dim", "48"), ("manifest", "data/m.jsonl")]).unwrap();
        assert_eq!(c.model.dim, 48);
        assert!(!c.model.adapters);
        assert_eq!(c.model.mapper, MapperKind::Linear);
        assert_eq!(c.train.base_lr, 1e-3);
        assert_eq!(c.run.regime, Regime::Prompts);
        assert_eq!(c.run.manifest.as_deref(), Some(Path::new("data/m.jsonl")));

        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for (k, v) in [("dims", "3"), ("dim", "abc"), ("adapters", "maybe"), ("mapper", "cnn"), ("template", "5"), ("heads", "5")] {
            let r = RunConfig::default().apply([(k, v)]);
            assert!(matches!(r, Err(Error::Config(_))), "{k}={v}: {r:?}");
        }
        assert!(RunConfig::default().apply_text("dim 3").is_err());
    }
}
