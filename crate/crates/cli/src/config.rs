//! Loading of experiment configs with command-line overrides.

use std::path::Path;

use qfb_core::experiments::ExperimentConfig;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("override `{key}` descends into a non-object value")]
    NotAnObject { key: String },
    #[error("invalid config: {0}")]
    Schema(serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] qfb_core::Error),
}

/// Sets `root[a][b]... = value` for a dotted key, creating objects on the way.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::NotAnObject { key: key.to_string() })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node.as_object_mut().ok_or_else(|| ConfigError::NotAnObject { key: key.to_string() })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `key=value`, where value is JSON when it parses as JSON and a string
/// otherwise (so `--set controller.fm_mode=exact` works unquoted).
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.to_string()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::Override(s.to_string()));
    }
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut value: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut value, &k, v)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(ConfigError::Schema)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_override_creates_objects() {
        let mut v = json!({"sim": {"dt": 1e-9}});
        apply_override(&mut v, "sim.sweep.beta_points", json!(8)).unwrap();
        apply_override(&mut v, "sim.dt", json!(2e-9)).unwrap();
        assert_eq!(v, json!({"sim": {"dt": 2e-9, "sweep": {"beta_points": 8}}}));
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), json!(3)));
        assert_eq!(parse_override("m=exact").unwrap(), ("m".into(), json!("exact")));
        assert_eq!(parse_override("m=null").unwrap(), ("m".into(), Value::Null));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn override_through_scalar_fails() {
        let mut v = json!({"sim": 3});
        assert!(apply_override(&mut v, "sim.dt", json!(1)).is_err());
        assert!(apply_override(&mut v, "sim..dt", json!(1)).is_err());
    }
}
