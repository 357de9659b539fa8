//! Loading TOML/JSON configs and applying `--set key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// A malformed config or override; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Reads `path` as TOML (or JSON when the extension is `.json`), filling
/// unspecified fields with defaults.
pub fn load<T: DeserializeOwned + Default + Serialize>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    };
    Ok(parsed)
}

/// Applies `key.path=value` overrides. Every key must already exist in the
/// serialized config; values are parsed as JSON and fall back to strings.
pub fn apply<T: DeserializeOwned + Serialize>(cfg: T, overrides: &[String]) -> Result<T> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            bail!(UsageError(format!("override {o:?} is not key=value")));
        };
        let slot = lookup(&mut tree, key)?;
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_value(tree).map_err(|e| UsageError(format!("invalid override: {e}")).into())
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| UsageError(format!("unknown config key {key:?}")))?;
    }
    Ok(node)
}
