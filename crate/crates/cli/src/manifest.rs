use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use reprosv_core::train::Mode;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::UsageError;

pub const MANIFEST_FILE: &str = "run.json";

/// Everything needed to re-execute a run: the command, the merged config
/// (with absolute input paths), the seed, and what the run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub config: RunConfig,
    /// Results files fed to `report`, in order.
    #[serde(default)]
    pub report_inputs: Vec<PathBuf>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, mode: Option<Mode>, config: RunConfig) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            mode,
            seed: config.experiment.seed,
            config,
            report_inputs: Vec::new(),
            checkpoints: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.version != env!("CARGO_PKG_VERSION") {
            return Err(UsageError(format!(
                "{}: manifest written by version {}, this build is {}",
                path.display(),
                m.version,
                env!("CARGO_PKG_VERSION")
            ))
            .into());
        }
        Ok(m)
    }
}
