//! Flat `key=value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Ordered key/value pairs; later insertions override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key=value`, got `{line}`", i + 1))?;
            let key = normalize_key(k);
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(normalize_key(key), value.to_string());
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .with_context(|| format!("expected `key=value`, got `{pair}`"))?;
        self.set(k, v.trim());
        Ok(())
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    /// Removes and parses `key`.
    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("invalid value `{v}` for `{key}`: {e}")),
        }
    }

    pub fn take_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| anyhow::anyhow!("invalid element `{s}` in `{key}`: {e}"))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Overwrites the fields of `base` named by remaining keys and consumes
    /// those keys. Values are parsed according to the field's current type.
    pub fn apply<T: Serialize + DeserializeOwned>(&mut self, base: &T) -> Result<T> {
        let Value::Object(mut fields) = serde_json::to_value(base)? else {
            bail!("configuration section is not a struct");
        };
        let keys: Vec<String> = self.values.keys().filter(|k| fields.contains_key(*k)).cloned().collect();
        for key in keys {
            let raw = self.values.remove(&key).expect("key present");
            let parsed = parse_like(&fields[&key], &key, &raw)?;
            fields.insert(key, parsed);
        }
        serde_json::from_value(Value::Object(fields)).context("applying configuration")
    }

    /// Fails on any key no section consumed.
    pub fn ensure_consumed(&self, command: &str) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
        bail!("unknown setting(s) for `{command}`: {}", keys.join(", "))
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_")
}

fn parse_like(current: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = || anyhow::anyhow!("invalid value `{raw}` for `{key}`");
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            Value::Array(
                raw.split(',')
                    .map(|s| parse_like(&proto, key, s.trim()))
                    .collect::<Result<_>>()?,
            )
        }
        _ if key == "modality" => match raw {
            "video" => Value::from("video_only"),
            "audio" => Value::from("audio_only"),
            other => Value::from(other),
        },
        _ => Value::from(raw),
    })
}

/// Flattens a struct into sorted `key=value` lines, the inverse of [`Settings::apply`].
pub fn echo<T: Serialize>(section: &T) -> Result<Vec<(String, String)>> {
    let Value::Object(fields) = serde_json::to_value(section)? else {
        bail!("configuration section is not a struct");
    };
    Ok(flatten(&fields))
}

fn flatten(fields: &Map<String, Value>) -> Vec<(String, String)> {
    let render = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect::<Vec<_>>()
            .join(","),
        Value::Null => "none".to_string(),
        other => other.to_string(),
    };
    fields.iter().map(|(k, v)| (k.clone(), render(v))).collect()
}
