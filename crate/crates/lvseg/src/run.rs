//! Run directories: every command writes into one directory and records what
//! it produced in `artifacts.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RECORD: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    /// Method label such as `T-FCNN+CRFs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Subjects processed, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<String>,
    /// Upstream run directories and files, by role.
    #[serde(default)]
    pub inputs: BTreeMap<String, PathBuf>,
    /// Produced files relative to the run directory.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    record: RunRecord,
}

impl RunDir {
    /// Creates `root`. An existing non-empty directory is an error unless
    /// `force`, in which case its contents are removed.
    pub fn create(root: &Path, command: &str, force: bool) -> Result<Self> {
        if root.exists() {
            let nonempty = fs::read_dir(root).with_context(|| format!("reading {}", root.display()))?.next().is_some();
            if nonempty {
                if !force {
                    bail!("output directory {} is not empty (pass --force to overwrite)", root.display());
                }
                fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
            }
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), record: RunRecord { command: command.into(), ..RunRecord::default() } })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_mut(&mut self) -> &mut RunRecord {
        &mut self.record
    }

    /// Absolute path of `rel`, creating its parent directory.
    pub fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn add(&mut self, rel: impl Into<PathBuf>) {
        self.record.artifacts.push(rel.into());
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        self.add(rel);
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.add(rel);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunRecord> {
        self.record.artifacts.sort();
        self.record.artifacts.dedup();
        let p = self.root.join(RECORD);
        fs::write(&p, serde_json::to_string_pretty(&self.record)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(self.record)
    }
}

/// Reads the record of a finished run.
pub fn open_run(root: &Path) -> Result<RunRecord> {
    let p = root.join(RECORD);
    if !p.is_file() {
        bail!("missing artifact {}: {} is not a finished run directory", p.display(), root.display());
    }
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Path of an artifact a previous stage must have produced.
pub fn require(root: &Path, rel: impl AsRef<Path>) -> Result<PathBuf> {
    let p = root.join(rel);
    if !p.exists() {
        bail!("missing artifact {}", p.display());
    }
    Ok(p)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
