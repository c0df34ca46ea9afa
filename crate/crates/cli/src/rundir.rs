//! Run directories: one per experiment, holding the effective config and
//! every artifact derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::ConfigError;

pub const CONFIG_FILE: &str = "config.toml";

/// Outcome of claiming a run directory.
pub enum Claim {
    /// Ready for (re)work; the effective config has been written.
    Fresh(PathBuf),
    /// `marker` already exists: the run is complete.
    Done(PathBuf),
}

/// Claims `<outdir>/<run-id>/`. An existing directory must hold the same
/// config unless `force`, which wipes it first.
pub fn claim(cfg: &ExperimentConfig, run_id: &str, force: bool, marker: &str) -> anyhow::Result<Claim> {
    let dir = cfg.outdir.join(run_id);
    let text = cfg.to_toml()?;
    if force && dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() {
        let existing = ExperimentConfig::load(&config_path)?;
        if existing.to_toml()? != text {
            return Err(ConfigError(format!(
                "{} was produced by a different config; pass --force to replace it",
                dir.display()
            ))
            .into());
        }
        if dir.join(marker).exists() {
            return Ok(Claim::Done(dir));
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&config_path, text.as_bytes())?;
    Ok(Claim::Fresh(dir))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads the config a run directory was produced with.
pub fn load_config(dir: &Path) -> anyhow::Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(ConfigError(format!("{} is not a run directory (no {CONFIG_FILE})", dir.display())).into());
    }
    ExperimentConfig::load(&path)
}
