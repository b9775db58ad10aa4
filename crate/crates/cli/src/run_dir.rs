//! Run directories: resolved config, manifest, metrics, checkpoints and reports
//! of one pipeline stage, created without clobbering earlier runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Layout of one run:
///
/// ```text
/// <root>/config.json      resolved configuration (enough to rerun)
/// <root>/manifest.json    run id, seeds, input hashes, versions
/// <root>/metrics.csv      per-step metrics
/// <root>/timing.json      wall-clock time (kept out of the metrics)
/// <root>/checkpoints/     weights
/// <root>/reports/         evaluation and analysis outputs
/// ```
#[derive(Debug, Clone)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Creates the directory tree. An existing non-empty directory is an error
    /// unless `force` is set, in which case it is removed first.
    pub fn create(root: PathBuf, force: bool) -> Result<Self, CliError> {
        Self::create_with(root, force, &["checkpoints", "reports"])
    }

    /// Like [`RunDirectory::create`] for runs that produce no weights.
    pub fn create_analysis(root: PathBuf, force: bool) -> Result<Self, CliError> {
        Self::create_with(root, force, &["reports"])
    }

    fn create_with(root: PathBuf, force: bool, subdirs: &[&str]) -> Result<Self, CliError> {
        prepare_output_dir(&root, force)?;
        for sub in subdirs {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    /// Checkpoint base path (`<name>.json` + `<name>.bin`).
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<(), CliError> {
        write_json(&self.config_path(), config)
    }

    pub fn write_timing(&self, wall_seconds: f64) -> Result<(), CliError> {
        write_json(
            &self.root.join("timing.json"),
            &serde_json::json!({ "wall_seconds": wall_seconds }),
        )
    }
}

/// Makes sure `dir` can be written: refuses a non-empty directory unless
/// `force`, which clears it.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    let occupied = match std::fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(CliError::io(dir, e)),
    };
    if occupied {
        if !force {
            return Err(CliError::Usage(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(eksft::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
