//! Run configuration files.
//!
//! A file is TOML (or JSON, by extension) with the engine sections `model`,
//! `encoders` and `train`, a `data` section, and an optional top-level
//! `preset` (`"default"` or `"smoke"`) that the file's keys are merged over.
//! Unknown keys are rejected everywhere.
//!
//! ```toml
//! preset = "smoke"
//!
//! [train]
//! lr = 0.002
//!
//! [data]
//! kind = "files"
//! root = "betaseg"
//! split = { train = ["high_c1"], val = ["high_c2"] }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scsam_core::engine::EngineConfig;

use crate::dataset::DataConfig;
use crate::error::{read_string, write_atomic, CliError, Result};

pub const RESOLVED_NAME: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub engine: EngineConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// The synthetic smoke setup.
    pub fn smoke() -> Self {
        Self {
            engine: EngineConfig::smoke(),
            data: DataConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_string(path)?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let value: Value = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?;
            serde_json::to_value(t).map_err(|e| CliError::config(path, e.to_string()))?
        };
        let mut cfg = Self::from_value(value).map_err(|m| CliError::config(path, m))?;
        if let DataConfig::Files(spec) = &mut cfg.data {
            if spec.root.is_relative() {
                if let Some(dir) = path.parent() {
                    spec.root = dir.join(&spec.root);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self, String> {
        let Value::Object(mut top) = value else {
            return Err("expected a table at the top level".into());
        };
        let base = match top.remove("preset") {
            None => EngineConfig::default(),
            Some(Value::String(p)) if p == "default" => EngineConfig::default(),
            Some(Value::String(p)) if p == "smoke" => EngineConfig::smoke(),
            Some(other) => return Err(format!("unknown preset {other}; expected \"default\" or \"smoke\"")),
        };
        let data = match top.remove("data") {
            Some(d) => serde_json::from_value(d).map_err(|e| format!("data: {e}"))?,
            None => DataConfig::default(),
        };
        let mut engine = serde_json::to_value(&base).map_err(|e| e.to_string())?;
        merge(&mut engine, Value::Object(top));
        let engine: EngineConfig = serde_json::from_value(engine).map_err(|e| e.to_string())?;
        Ok(Self { engine, data })
    }

    /// Applies `key=value` overrides. Values are JSON, falling back to a
    /// bare string; keys are dotted paths into the engine or data sections.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for raw in overrides {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {raw:?} is not key=value")))?;
            let key = key.trim();
            let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
            if let Some(rest) = key.strip_prefix("data.") {
                let mut data = serde_json::to_value(&self.data).expect("data config serialises");
                set_existing(&mut data, rest, value).map_err(|m| CliError::Usage(format!("override {key}: {m}")))?;
                self.data = serde_json::from_value(data).map_err(|e| CliError::Usage(format!("override {key}: {e}")))?;
            } else {
                self.engine = self
                    .engine
                    .with_override(key, value)
                    .map_err(|e| CliError::Usage(format!("override {key}: {e}")))?;
            }
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serialises")
    }

    /// Writes `resolved_config.json` into `dir`. Loading that file gives
    /// back this exact configuration.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(RESOLVED_NAME), self.to_json().as_bytes())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_existing(root: &mut Value, dotted: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(|| format!("{part} is not a table"))?;
        if !obj.contains_key(*part) {
            let known: Vec<&String> = obj.keys().collect();
            return Err(format!("unknown key {part:?}; known keys {known:?}"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}
