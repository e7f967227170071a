//! Run manifests: one `manifest.json` per output directory, recording
//! the command, its full configuration, the seed, and every artifact, so
//! any run can be replayed bit-identically.

use std::path::{Path, PathBuf};

use fg_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// The command's full argument set, replayable via `--replay`.
    pub config: serde_json::Value,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<RunManifest> {
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            artifacts: Vec::new(),
            stats: None,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(out_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Create the output directory; reruns overwrite their own outputs.
pub fn prepare_out_dir(out: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Resolve `--replay`: load the stored args, keeping the new output dir.
pub fn maybe_replay<A>(replay: Option<&PathBuf>, expected_command: &str) -> Result<Option<A>>
where
    A: for<'de> Deserialize<'de>,
{
    let Some(path) = replay else {
        return Ok(None);
    };
    let manifest = RunManifest::load(path)?;
    if manifest.command != expected_command {
        return Err(Error::Config(format!(
            "manifest records a '{}' run, not '{expected_command}'",
            manifest.command
        )));
    }
    let args =
        serde_json::from_value(manifest.config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Some(args))
}
