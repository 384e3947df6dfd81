//! Layered run configuration: defaults < JSON file < `MOGAF_*` environment < flags.
//!
//! Every layer is a JSON object merged into the serialized defaults, so all
//! layers share one key space. Environment keys are lowercased and `__`
//! separates nesting levels: `MOGAF_FORECASTER__EPOCHS=50` sets
//! `forecaster.epochs`. Flag overrides use dotted paths (`--set optim.steps=20`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use mogaf::pipeline::PipelineConfig;
use mogaf::{Error, Result};

pub const ENV_PREFIX: &str = "MOGAF_";

/// Everything that determines a run besides input paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Keys whose subtree is free-form (not present in the defaults).
const OPEN_KEYS: [&str; 1] = ["synth"];

fn check_known(defaults: &Value, layer: &Value, path: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(l)) = (defaults, layer) else {
        return Ok(());
    };
    for (k, v) in l {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        if path.is_empty() && OPEN_KEYS.contains(&k.as_str()) {
            continue;
        }
        match d.get(k) {
            Some(dv) => check_known(dv, v, &full)?,
            None => return Err(Error::Config(format!("unknown config key '{full}'"))),
        }
    }
    Ok(())
}

fn merge(base: &mut Value, layer: &Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, l) => *b = l.clone(),
    }
}

/// Scalar text as JSON when it parses, otherwise as a string.
fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn nested(path: &[&str], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, key| {
        let mut m = Map::new();
        m.insert((*key).to_string(), acc);
        Value::Object(m)
    })
}

/// Layer built from `MOGAF_*` variables.
pub fn env_layer(vars: impl IntoIterator<Item = (String, String)>) -> Value {
    let mut layer = Value::Object(Map::new());
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (k, v) in vars {
        let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = key.split("__").collect();
        merge(&mut layer, &nested(&path, parse_scalar(&v)));
    }
    layer
}

/// Layer from `key.path=value` assignments.
pub fn assignment_layer(assignments: &[String]) -> Result<Value> {
    let mut layer = Value::Object(Map::new());
    for a in assignments {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got '{a}'")))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key '{k}'")));
        }
        merge(&mut layer, &nested(&path, parse_scalar(v.trim())));
    }
    Ok(layer)
}

/// Resolves the layers in order, rejecting keys the config does not have.
pub fn resolve(file: Option<&Path>, env: Value, flags: Value) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !layer.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        check_known(&defaults, &layer, "")?;
        merge(&mut merged, &layer);
    }
    for layer in [env, flags] {
        check_known(&defaults, &layer, "")?;
        merge(&mut merged, &layer);
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 3, "forecaster": {"epochs": 7, "layers": 2}}"#).unwrap();
        let env = env_layer(vars(&[("MOGAF_FORECASTER__EPOCHS", "9"), ("HOME", "/x")]));
        let flags = assignment_layer(&["seed=5".into()]).unwrap();
        let cfg = resolve(Some(&path), env, flags).unwrap();
        assert_eq!(cfg.pipeline.seed, 5);
        assert_eq!(cfg.pipeline.forecaster.epochs, 9);
        assert_eq!(cfg.pipeline.forecaster.layers, 2);
        assert_eq!(cfg.pipeline.forecaster.d_model, 32);
    }

    #[test]
    fn strings_and_enums_parse() {
        let flags = assignment_layer(&["preset=two-groups".into(), "ablation=no-masking".into()]).unwrap();
        let cfg = resolve(None, Value::Object(Map::new()), flags).unwrap();
        assert_eq!(cfg.pipeline.preset, "two-groups");
        assert_eq!(cfg.pipeline.ablation, mogaf::pipeline::Ablation::NoMasking);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let empty = Value::Object(Map::new());
        let bad = assignment_layer(&["optim.nope=1".into()]).unwrap();
        assert!(matches!(resolve(None, empty.clone(), bad), Err(Error::Config(_))));
        assert!(assignment_layer(&["seed".into()]).is_err());
        assert!(assignment_layer(&["a..b=1".into()]).is_err());
        let wrong_type = assignment_layer(&["seed=\"x\"".into()]).unwrap();
        assert!(matches!(resolve(None, empty.clone(), wrong_type), Err(Error::Config(_))));
        let env = env_layer(vars(&[("MOGAF_BOGUS", "1")]));
        assert!(resolve(None, env, empty).is_err());
    }

    #[test]
    fn synth_subtree_is_open() {
        let synth = serde_json::to_string(&mogaf::synth::SynthConfig::preset("two-groups", 1).unwrap()).unwrap();
        let flags = assignment_layer(&[format!("synth={synth}")]).unwrap();
        let cfg = resolve(None, Value::Object(Map::new()), flags).unwrap();
        assert!(cfg.pipeline.synth.is_some());
    }
}
