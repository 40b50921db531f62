use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use csipred::transfer::TrainConfig;

use crate::Cli;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// The parsed command line, environment overrides included.
    pub cli: Cli,
    /// Resolved configuration, when the command builds one.
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub build: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn build_id() -> String {
    match option_env!("CSIPRED_BUILD_ID") {
        Some(id) => format!("{} ({id})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `<out>.manifest.json` next to the primary output.
pub fn default_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write(path: &Path, m: &RunManifest) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    csipred::store::write_atomic(path, text.as_bytes())
        .with_context(|| format!("writing manifest {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<Cli> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let m: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    Ok(m.cli)
}
