//! Run configuration assembly: a JSON file of dotted keys, `--set` overrides
//! and the global `--seed`/`--out` flags, merged into one nested document.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mdkd_core::Error;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Merged configuration document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    root: Map<String, Value>,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

impl ConfigDoc {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: invalid JSON: {e}", path.display())))?;
            let Value::Object(map) = value else {
                return Err(config_err(format!("{}: config must be a JSON object", path.display())));
            };
            for (k, v) in map {
                doc.set(&k, v)?;
            }
        }
        for item in sets {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {item:?}")))?;
            doc.set(k.trim(), parse_value(v))?;
        }
        Ok(doc)
    }

    /// Sets a dotted key, merging objects.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(config_err(format!("invalid config key {key:?}")));
        }
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut node = &mut self.root;
        for (i, p) in parts.iter().enumerate() {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| config_err(format!("config key {} is not a section", parts[..=i].join("."))))?;
        }
        match (node.get_mut(last), value) {
            (Some(Value::Object(existing)), Value::Object(incoming)) => {
                for (k, v) in incoming {
                    let mut sub = ConfigDoc {
                        root: std::mem::take(existing),
                    };
                    sub.set(&k, v)?;
                    *existing = sub.root;
                }
            }
            (_, value) => {
                node.insert(last.to_string(), value);
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        let mut node = &self.root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            let v = node.get(p)?;
            if parts.peek().is_none() {
                return Some(v);
            }
            node = v.as_object()?;
        }
        None
    }

    /// Sets `key` unless it is present; errors if present with another value.
    pub fn require(&mut self, key: &str, value: Value) -> Result<()> {
        match self.get(key) {
            None => self.set(key, value),
            Some(v) if *v == value => Ok(()),
            Some(v) => Err(config_err(format!("{key} must be {value} for this command, got {v}"))),
        }
    }

    pub fn to_value(&self) -> Value {
        Value::Object(self.root.clone())
    }

    pub fn build<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.to_value()).map_err(|e| config_err(format!("invalid configuration: {e}")))
    }
}

/// `--set` values are JSON when they parse as JSON and strings otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}
