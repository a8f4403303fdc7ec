//! Dataset directories written by `gen-data` and read by every later stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use ptdt_core::artifact::{read_json, write_json};
use ptdt_core::envs::{Family, TaskSpec};
use ptdt_core::eval::{Baseline, BaselineTable};
use ptdt_core::pretrain::TaskData;
use ptdt_core::trajdata::EpisodeSet;
use ptdt_core::FORMAT_VERSION;

pub const MANIFEST: &str = "manifest.json";
pub const BASELINES: &str = "baselines.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub family: Family,
    pub medium_scale: f32,
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
    /// Task key to episode file, relative to the directory.
    pub files: BTreeMap<String, String>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            bail!("dataset not found: {} does not exist", path.display());
        }
        let manifest: Manifest = read_json(&path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ptdt_core::Error::Version {
                path,
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn save_manifest(dir: &Path, manifest: &Manifest) -> anyhow::Result<()> {
        Ok(write_json(&dir.join(MANIFEST), manifest)?)
    }

    pub fn episodes(&self, task: &TaskSpec) -> anyhow::Result<EpisodeSet> {
        let key = BaselineTable::key(task);
        let file = self
            .manifest
            .files
            .get(&key)
            .with_context(|| format!("{} has no episodes for task {key}", self.dir.display()))?;
        Ok(EpisodeSet::load(&self.dir.join(file))?)
    }

    pub fn train_data(&self) -> anyhow::Result<Vec<TaskData>> {
        self.manifest
            .train
            .iter()
            .map(|t| {
                Ok(TaskData {
                    task: t.clone(),
                    data: self.episodes(t)?,
                })
            })
            .collect()
    }

    /// The `i`-th held-out task.
    pub fn test_task(&self, i: usize) -> anyhow::Result<&TaskSpec> {
        self.manifest.test.get(i).with_context(|| {
            format!(
                "held-out task {i} requested but the dataset has {}",
                self.manifest.test.len()
            )
        })
    }

    pub fn baseline(&self, task: &TaskSpec) -> anyhow::Result<Baseline> {
        let table = BaselineTable::load(&self.dir.join(BASELINES))?;
        Ok(table.get(task)?.clone())
    }
}
