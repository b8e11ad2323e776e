//! Loading experiment configurations and writing run manifests.

use std::path::Path;

use anyhow::{bail, Context, Result};
use seld_core::experiment::ExperimentConfig;
use serde::Serialize;

/// Reads a TOML config, or a JSON run manifest (its `config` field).
/// Without a path every field takes its default.
pub fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let inner = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(inner).with_context(|| format!("parsing {}", path.display()))?
        }
        Some("toml") | None => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        Some(other) => bail!("unsupported config extension .{other} (use .toml or .json)"),
    };
    Ok(cfg)
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub version: &'a str,
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    details: serde_json::Value,
) -> Result<()> {
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), command, config, details };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
