//! Config loading with environment-variable overrides.
//!
//! Every config key can be overridden by `TWINREC_<KEY>` (uppercased field
//! name). Values are parsed as JSON where possible, otherwise taken as
//! strings. Variables that do not mirror a key of the config being loaded
//! are ignored, so one environment can carry overrides for several commands.

use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use twinrec_core::trainer::TrainConfig;
use twinrec_core::Error;

pub const ENV_PREFIX: &str = "TWINREC_";

/// When set to 1/true, the wall-time column of TrainLog CSVs is written as
/// zero so pipeline artifacts become byte-reproducible.
pub fn fixed_timing() -> bool {
    matches!(
        std::env::var("TWINREC_FIXED_TIMING").as_deref(),
        Ok("1") | Ok("true")
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub delimiter: String,
    pub min_count: usize,
    pub quantile: f64,
    pub max_len: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            delimiter: "\t".into(),
            min_count: 5,
            quantile: 0.95,
            max_len: 50,
        }
    }
}

impl PrepareConfig {
    const KEYS: &'static [&'static str] = &["delimiter", "min_count", "quantile", "max_len"];

    pub fn delimiter_char(&self) -> Result<char> {
        let mut chars = self.delimiter.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Ok(c),
            _ => anyhow::bail!(Error::Config(format!(
                "delimiter must be a single character, got {:?}",
                self.delimiter
            ))),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "loss_kind",
    "alpha",
    "lambda",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "sce_k",
    "bce_m",
    "dim",
    "layers",
    "heads",
    "dropout",
    "max_len",
    "bt_row_normalize",
];

fn read_json_object(path: Option<&Path>) -> Result<Value> {
    let value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("config {}: {e}", p.display()),
                ))
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => Value::Object(Default::default()),
    };
    if !value.is_object() {
        anyhow::bail!(Error::Config("config must be a JSON object".into()));
    }
    Ok(value)
}

fn apply_env_overrides(mut value: Value, known_keys: &[&str]) -> Value {
    let object = value.as_object_mut().expect("checked object");
    for (name, raw) in std::env::vars() {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = rest.to_ascii_lowercase();
        if !known_keys.contains(&key.as_str()) {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(&raw).unwrap_or(Value::String(raw));
        object.insert(key, parsed);
    }
    value
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let value = apply_env_overrides(read_json_object(path)?, TRAIN_KEYS);
    Ok(TrainConfig::from_json_value(value)?)
}

pub fn load_prepare_config(path: Option<&Path>) -> Result<PrepareConfig> {
    let value = apply_env_overrides(read_json_object(path)?, PrepareConfig::KEYS);
    let cfg: PrepareConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if !(cfg.quantile > 0.0 && cfg.quantile < 1.0) {
        anyhow::bail!(Error::Config("quantile must lie in (0, 1)".into()));
    }
    if cfg.min_count == 0 || cfg.max_len < 2 {
        anyhow::bail!(Error::Config(
            "min_count must be >= 1 and max_len >= 2".into()
        ));
    }
    cfg.delimiter_char()?;
    Ok(cfg)
}
