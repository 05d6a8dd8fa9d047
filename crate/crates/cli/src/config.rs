//! Run configuration: a TOML file whose top level mirrors `ExperimentConfig`,
//! plus `[data]`, `[corpus]`, `[model]` and `[sweep]` sections for the
//! command-line driver. Flags override file values; the merged result is what
//! gets snapshotted into the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use reprosv_core::data::CorpusConfig;
use reprosv_core::train::{ExperimentConfig, Mode};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomain {
    Source,
    #[default]
    Target,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen-data`.
    pub corpus: Option<PathBuf>,
    pub write_wavs: bool,
    pub eval_domain: EvalDomain,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub padding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub modes: Vec<Mode>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            n_values: vec![0, 3200, 6400],
            k_values: vec![1, 2],
            modes: vec![Mode::AdaptVanilla, Mode::AdaptGradEst],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data: DataSection,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub sweep: SweepSection,
}

fn take_section<T: serde::de::DeserializeOwned + Default>(
    table: &mut toml::Table,
    key: &str,
    path: &Path,
) -> Result<T> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e| UsageError(format!("{}: section [{key}]: {e}", path.display())).into()),
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) -> Result<()> {
    if let Some(path) = p {
        *path = std::path::absolute(base.join(&*path))?;
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path`, applies a `--seed` override and resolves relative paths
    /// against the config file's directory.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed {
            let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if !table.contains_key("seed") {
            return Err(UsageError(format!(
                "{}: missing required key `seed` (or pass --seed)",
                path.display()
            ))
            .into());
        }
        let mut data: DataSection = take_section(&mut table, "data", path)?;
        let corpus = take_section(&mut table, "corpus", path)?;
        let mut model: ModelSection = take_section(&mut table, "model", path)?;
        let sweep = take_section(&mut table, "sweep", path)?;
        let experiment: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;

        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut data.corpus)?;
        resolve(base, &mut model.checkpoint)?;
        resolve(base, &mut model.padding)?;
        Ok(RunConfig {
            experiment,
            data,
            corpus,
            model,
            sweep,
        })
    }
}

/// Value of an optional key that the current command needs.
pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| UsageError(format!("missing required key `{key}`")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn sections_and_overrides() {
        let (dir, p) = write(
            "seed = 3\nepochs = 4\n[padding]\nl = 800\n[data]\ncorpus = \"c\"\n[corpus]\nsource_speakers = 5\n[sweep]\nn_values = [0, 10]\n",
        );
        let cfg = RunConfig::load(&p, Some(9)).unwrap();
        assert_eq!(cfg.experiment.seed, 9);
        assert_eq!(cfg.experiment.epochs, 4);
        assert_eq!(cfg.experiment.padding.l, 800);
        assert_eq!(cfg.corpus.source_speakers, 5);
        assert_eq!(cfg.sweep.n_values, vec![0, 10]);
        assert_eq!(cfg.sweep.k_values, vec![1, 2]);
        assert_eq!(cfg.data.corpus.unwrap(), dir.path().join("c"));
    }

    #[test]
    fn missing_seed_is_named() {
        let (_d, p) = write("epochs = 4\n");
        let err = RunConfig::load(&p, None).unwrap_err().to_string();
        assert!(err.contains("`seed`"), "{err}");
        assert!(RunConfig::load(&p, Some(1)).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, p) = write("seed = 1\nepoch = 4\n");
        let err = RunConfig::load(&p, None).unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
        let (_d, p) = write("seed = 1\n[model]\ncheckpont = \"x\"\n");
        assert!(RunConfig::load(&p, None).is_err());
    }
}
