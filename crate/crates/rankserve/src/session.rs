//! Session description, candidate payloads and the on-disk session file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ptdt_core::artifact::{config_hash, read_json, write_json};
use ptdt_core::envs::{Family, TaskSpec};
use ptdt_core::eval::Rollout;
use ptdt_core::trajdata::PromptSegment;
use ptdt_core::zorank::TunerConfig;
use ptdt_core::FORMAT_VERSION;

use crate::Result;

/// Everything needed to run (or resume) one human-ranked tuning session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub checkpoint: PathBuf,
    pub task: TaskSpec,
    /// Prompt the tuner starts from.
    pub prompt: PromptSegment,
    pub tuner: TunerConfig,
    /// Rollout episodes shown per candidate.
    pub episodes: usize,
    pub target_rtg: f32,
    /// Seed of the candidate rollouts (shared by all candidates of a query).
    pub rollout_seed: u64,
}

impl SessionSpec {
    pub fn id(&self) -> String {
        config_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerState {
    Idle,
    AwaitingRanking,
    Finished,
    Aborted,
}

impl TunerState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TunerState::Finished | TunerState::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub family: Family,
    pub task_index: usize,
    pub task_param: Vec<f32>,
    pub description: String,
    pub horizon: usize,
}

impl From<&TaskSpec> for TaskInfo {
    fn from(task: &TaskSpec) -> Self {
        Self {
            family: task.family,
            task_index: task.task_index,
            task_param: task.task_param.clone(),
            description: task.describe(),
            horizon: task.horizon,
        }
    }
}

/// One rollout drawn as a 2-D polyline: positions for the planar
/// families, `(t, v)` for vel-1d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<[f32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_return: Option<f64>,
}

impl Trajectory {
    pub fn from_rollout(family: Family, rollout: &Rollout, reveal: bool) -> Self {
        let points = rollout
            .states
            .iter()
            .enumerate()
            .map(|(t, s)| match family {
                Family::PointVel1d => [t as f32, s[0]],
                Family::PointDir2d | Family::PointReach2d => [s[0], s[1]],
            })
            .collect();
        Self {
            points,
            episode_return: reveal.then_some(rollout.total_return),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub trajectories: Vec<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_return: Option<f64>,
}

/// The query of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub t: usize,
    pub m: usize,
    pub k: usize,
    pub returns_hidden: bool,
    pub task: TaskInfo,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn build(t: usize, k: usize, task: &TaskSpec, rollouts: &[Vec<Rollout>], reveal: bool) -> Self {
        let candidates = rollouts
            .iter()
            .enumerate()
            .map(|(index, rs)| Candidate {
                index,
                trajectories: rs.iter().map(|r| Trajectory::from_rollout(task.family, r, reveal)).collect(),
                mean_return: reveal
                    .then(|| rs.iter().map(|r| r.total_return).sum::<f64>() / rs.len().max(1) as f64),
            })
            .collect();
        Self {
            t,
            m: rollouts.len(),
            k,
            returns_hidden: !reveal,
            task: TaskInfo::from(task),
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedRanking {
    pub t: usize,
    pub order: Vec<usize>,
}

/// `session.json`: enough to resume after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub format_version: u32,
    pub id: String,
    pub spec: SessionSpec,
    pub state: TunerState,
    pub t: usize,
    #[serde(default)]
    pub pending: Option<CandidateSet>,
    #[serde(default)]
    pub history: Vec<SubmittedRanking>,
    #[serde(default)]
    pub error: Option<String>,
}

impl SessionFile {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("session.json")
    }

    pub fn trace_path(dir: &Path) -> PathBuf {
        dir.join("trace.jsonl")
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(None);
        }
        let file: SessionFile = read_json(&path)?;
        if file.format_version != FORMAT_VERSION {
            return Err(ptdt_core::Error::Version {
                path,
                found: file.format_version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        Ok(Some(file))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Ok(write_json(&Self::path(dir), self)?)
    }
}
