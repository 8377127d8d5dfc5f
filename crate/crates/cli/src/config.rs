//! JSON configuration files and `--set key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};
use tapamp::ensemble::{check_schema_version, EnsembleConfig};

use crate::CliError;

/// Reads a JSON object from `path` and applies the overrides in order.
pub fn load(path: &Path, overrides: &[String]) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
    }
    for arg in overrides {
        apply_override(&mut value, arg)?;
    }
    Ok(value)
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Model parameters live at the top
/// level, so a leading `params.` segment is accepted and dropped.
pub fn apply_override(root: &mut Value, arg: &str) -> Result<(), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{arg}` is not of the form key=value")))?;
    let key = key.trim();
    let key = key.strip_prefix("params.").unwrap_or(key);
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("override `{arg}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for segment in &path[..path.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{arg}`: `{segment}` is not inside an object")))?;
        node = obj.entry(segment.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("override `{arg}` does not address an object field")))?;
    obj.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn check_version(value: &Value) -> Result<(), CliError> {
    match value.get("schema_version") {
        None => Ok(()),
        Some(Value::String(v)) => Ok(check_schema_version(v)?),
        Some(other) => Err(CliError::Usage(format!("schema_version must be a string, got {other}"))),
    }
}

fn parse<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    check_version(&value)?;
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

pub fn ensemble_config(value: Value) -> Result<EnsembleConfig, CliError> {
    let cfg: EnsembleConfig = parse(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// One axis of a phase sweep: a single value, an explicit list, or an
/// inclusive evenly spaced range.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Single(f64),
    List(Vec<f64>),
    Range { from: f64, to: f64, steps: usize },
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::Single(x) => vec![*x],
            Grid::List(v) => v.clone(),
            Grid::Range { from, to, steps } => match steps {
                0 => Vec::new(),
                1 => vec![*from],
                _ => (0..*steps).map(|i| from + (to - from) * i as f64 / (*steps - 1) as f64).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(default)]
    pub schema_version: Option<String>,
    pub beta: Grid,
    pub h: Grid,
    /// Gauss–Hermite order; the library default when absent.
    #[serde(default)]
    pub order: Option<usize>,
}

impl PhaseConfig {
    /// `(β, h)` pairs with `β` as the outer axis.
    pub fn points(&self) -> Result<Vec<(f64, f64)>, CliError> {
        let (betas, hs) = (self.beta.values(), self.h.values());
        if betas.is_empty() || hs.is_empty() {
            return Err(CliError::Usage("phase grid is empty".into()));
        }
        Ok(betas.iter().flat_map(|&b| hs.iter().map(move |&h| (b, h))).collect())
    }
}

pub fn phase_config(value: Value) -> Result<PhaseConfig, CliError> {
    parse(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_and_strip_prefix() {
        let mut v = json!({"beta": 1.0, "h": 0.5});
        apply_override(&mut v, "params.beta=1.5").unwrap();
        apply_override(&mut v, "track_fields=[[0, 3]]").unwrap();
        apply_override(&mut v, "choice=stein_recentering").unwrap();
        apply_override(&mut v, "a.b.c=2").unwrap();
        assert_eq!(v["beta"], json!(1.5));
        assert_eq!(v["track_fields"], json!([[0, 3]]));
        assert_eq!(v["choice"], json!("stein_recentering"));
        assert_eq!(v["a"]["b"]["c"], json!(2));
        assert!(apply_override(&mut v, "beta").is_err());
        assert!(apply_override(&mut v, "beta.x=1").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let err = ensemble_config(json!({"h": 0.5, "n": 10, "k": 3, "replicas": 2})).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
        assert_eq!(err.exit_code(), crate::EXIT_USAGE);
    }

    #[test]
    fn unknown_major_version_is_rejected() {
        let v = json!({"schema_version": "2.0", "beta": 1.0, "h": 0.5, "n": 10, "k": 3, "replicas": 2});
        assert_eq!(ensemble_config(v).unwrap_err().exit_code(), crate::EXIT_USAGE);
        let v = json!({"schema_version": "1.3", "beta": 1.0, "h": 0.5, "n": 10, "k": 3, "replicas": 2});
        assert!(ensemble_config(v).is_ok());
    }

    #[test]
    fn guard_maps_to_its_own_code() {
        let v = json!({"beta": 1.0, "h": 0.5, "n": 1000, "k": 3, "replicas": 2, "track_derivatives": true});
        assert_eq!(ensemble_config(v).unwrap_err().exit_code(), crate::EXIT_GUARD);
    }

    #[test]
    fn grids() {
        assert_eq!(Grid::Range { from: 0.0, to: 1.0, steps: 3 }.values(), vec![0.0, 0.5, 1.0]);
        assert!(Grid::Range { from: 0.0, to: 1.0, steps: 0 }.values().is_empty());
        let cfg = phase_config(json!({"beta": [1.0, 2.0], "h": 0.5})).unwrap();
        assert_eq!(cfg.points().unwrap(), vec![(1.0, 0.5), (2.0, 0.5)]);
        let cfg = phase_config(json!({"beta": [], "h": 0.5})).unwrap();
        assert!(cfg.points().is_err());
    }
}
