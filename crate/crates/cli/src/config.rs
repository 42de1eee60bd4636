//! Strict JSON run configs. Every flag of a subcommand is also a config key
//! (snake_case); flags override file values. `seed` and `precision` are
//! accepted by every subcommand.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Keys shared by all subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Common {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

const COMMON_KEYS: [&str; 2] = ["seed", "precision"];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey(String),
    TypeMismatch(String),
    Parse(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            ConfigError::TypeMismatch(k) => write!(f, "config key `{k}` has the wrong type"),
            ConfigError::Parse(m) => write!(f, "config is not a JSON object: {m}"),
        }
    }
}

pub fn parse_file(text: &str) -> Result<Map<String, Value>, ConfigError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ConfigError::Parse("top level must be an object".into())),
        Err(e) => Err(ConfigError::Parse(e.to_string())),
    }
}

/// Checks keys one at a time so errors name the offending key.
fn check_keys<T: DeserializeOwned>(map: &Map<String, Value>) -> Result<(), ConfigError> {
    for (k, v) in map {
        let single = Value::Object(Map::from_iter([(k.clone(), v.clone())]));
        if let Err(e) = serde_json::from_value::<T>(single) {
            return Err(if e.to_string().starts_with("unknown field") {
                ConfigError::UnknownKey(k.clone())
            } else {
                ConfigError::TypeMismatch(k.clone())
            });
        }
    }
    Ok(())
}

fn overlay<T: Serialize>(base: &mut Map<String, Value>, flags: &T) {
    if let Ok(Value::Object(f)) = serde_json::to_value(flags) {
        for (k, v) in f {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
}

/// Merges a config file map with flag values. Flags set on the command
/// line win.
pub fn merge<T: Serialize + DeserializeOwned>(
    mut file: Map<String, Value>,
    flags: &T,
    common_flags: &Common,
) -> Result<(T, Common), ConfigError> {
    let mut common_map = Map::new();
    for k in COMMON_KEYS {
        if let Some(v) = file.remove(k) {
            common_map.insert(k.to_string(), v);
        }
    }
    check_keys::<Common>(&common_map)?;
    check_keys::<T>(&file)?;
    overlay(&mut file, flags);
    overlay(&mut common_map, common_flags);
    let args = serde_json::from_value(Value::Object(file)).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let common = serde_json::from_value(Value::Object(common_map)).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok((args, common))
}

pub fn load<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    flags: &T,
    common_flags: &Common,
) -> Result<(T, Common), CliError> {
    let file = match path {
        None => Map::new(),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            parse_file(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    merge(file, flags, common_flags).map_err(|e| CliError::Usage(e.to_string()))
}

/// The fully resolved config as one flat JSON object.
pub fn snapshot<T: Serialize>(args: &T, seed: u64, precision: Precision) -> Value {
    let mut m = match serde_json::to_value(args) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    };
    m.insert("seed".into(), Value::from(seed));
    m.insert("precision".into(), serde_json::to_value(precision).expect("enum serializes"));
    Value::Object(m)
}
