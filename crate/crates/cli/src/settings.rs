//! Flat `key = value` settings resolved from defaults, a config file and
//! command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use limaml::training::parse_key_values;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Common {
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn json_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Field names and textual values of a serializable struct.
pub fn defaults_of<T: Serialize>(value: &T) -> Vec<(String, String)> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map.iter().map(|(k, v)| (k.clone(), json_text(v))).collect(),
        _ => Vec::new(),
    }
}

impl Settings {
    /// `defaults` names every accepted key. A config file must contain all
    /// of `required`; `flags` are dedicated command-line options and win
    /// over `--set`.
    pub fn resolve(
        defaults: Vec<(String, String)>,
        required: &[&str],
        common: &Common,
        flags: &[(&str, Option<String>)],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = defaults.into_iter().collect();
        let known = |values: &BTreeMap<String, String>, key: &str| -> Result<(), CliError> {
            if values.contains_key(key) {
                Ok(())
            } else {
                Err(CliError::usage(format!("unknown configuration key `{key}`")))
            }
        };
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let file = parse_key_values(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            for key in required {
                if !file.contains_key(*key) {
                    return Err(CliError::usage(format!(
                        "{}: missing configuration key `{key}`",
                        path.display()
                    )));
                }
            }
            for (k, v) in file {
                known(&values, &k)?;
                values.insert(k, v);
            }
        }
        for item in &common.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
            let k = k.trim();
            known(&values, k)?;
            values.insert(k.to_string(), v.trim().to_string());
        }
        let common_flags = [
            ("seed", common.seed.map(|s| s.to_string())),
            ("workers", common.workers.map(|w| w.to_string())),
        ];
        for (k, v) in common_flags.iter().chain(flags) {
            if let Some(v) = v {
                known(&values, k)?;
                values.insert((*k).to_string(), v.clone());
            }
        }
        Ok(Self { values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::usage(format!("bad value `{raw}` for `{key}`")))
    }

    /// Comma-separated list; empty text is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::usage(format!("bad value `{s}` in `{key}`")))
            })
            .collect()
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The settings as `--set` flags, for a self-contained command line.
    pub fn to_args(&self) -> Vec<String> {
        self.values
            .iter()
            .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
            .collect()
    }

    /// Overlays the settings on the fields of `base` that they name.
    pub fn build<T: Serialize + DeserializeOwned>(&self, base: &T) -> Result<T, CliError> {
        let Value::Object(mut obj) = serde_json::to_value(base).map_err(|e| CliError::runtime(e.to_string()))? else {
            return Err(CliError::runtime("settings target is not a struct".into()));
        };
        for (key, slot) in obj.iter_mut() {
            let Some(raw) = self.values.get(key) else { continue };
            let bad = || CliError::usage(format!("bad value `{raw}` for `{key}`"));
            *slot = match slot {
                Value::Number(_) => match serde_json::from_str::<Value>(raw) {
                    Ok(v @ Value::Number(_)) => v,
                    _ => return Err(bad()),
                },
                Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
                Value::String(_) => Value::String(raw.clone()),
                _ if raw == "none" => Value::Null,
                _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone())),
            };
        }
        serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::usage(format!("invalid settings: {e}")))
    }
}
