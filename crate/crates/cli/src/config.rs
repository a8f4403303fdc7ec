//! TOML run configuration, one section per stage.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use ptdt_core::dtmodel::ModelConfig;
use ptdt_core::envs::{Family, Quality};
use ptdt_core::eval::ablate::{AblationKind, AdaptConfig};
use ptdt_core::pretrain::PretrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Run name; the subcommand when unset.
    pub name: Option<String>,
    pub runs_dir: PathBuf,
    pub seed: u64,
    pub env: EnvSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub tune: TuneSection,
    pub ablate: AblateSection,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            name: None,
            runs_dir: "runs".into(),
            seed: 0,
            env: EnvSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            tune: TuneSection::default(),
            ablate: AblateSection::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Bad configuration; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub family: Family,
    pub n_train: usize,
    pub n_test: usize,
    pub episodes_per_task: usize,
    /// Episodes used to calibrate the medium policy's noise.
    pub calibration_episodes: usize,
    pub baseline_episodes: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            family: Family::PointVel1d,
            n_train: 8,
            n_test: 2,
            episodes_per_task: 30,
            calibration_episodes: 50,
            baseline_episodes: 50,
        }
    }
}

/// Overrides of the reference architecture.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_embed: Option<usize>,
    pub k: Option<usize>,
    pub k_star: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub prompt_loss: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self, family: Family) -> ModelConfig {
        let mut m = ModelConfig::reference(family.state_dim(), family.action_dim(), family.horizon());
        m.n_layers = self.n_layers.unwrap_or(m.n_layers);
        m.n_heads = self.n_heads.unwrap_or(m.n_heads);
        m.d_embed = self.d_embed.unwrap_or(m.d_embed);
        m.k = self.k.unwrap_or(m.k);
        m.k_star = self.k_star.unwrap_or(m.k_star);
        m.mlp_ratio = self.mlp_ratio.unwrap_or(m.mlp_ratio);
        m.prompt_loss = self.prompt_loss.unwrap_or(m.prompt_loss);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Offline,
    Online,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub oracle: OracleKind,
    /// Quality of the episodes the initial prompt is cut from.
    pub prompt_init: Quality,
    /// Quality of the target-task samples the offline oracle and fine-tuning see.
    pub data_quality: Quality,
    /// Window budget; all windows when unset.
    pub samples: Option<usize>,
    /// Position of the task in the held-out split.
    pub task: usize,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            oracle: OracleKind::Offline,
            prompt_init: Quality::Medium,
            data_quality: Quality::Expert,
            samples: None,
            task: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub kind: AblationKind,
    pub sizes: Vec<usize>,
    /// Also run with every available window.
    pub include_full: bool,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            kind: AblationKind::Samples,
            sizes: vec![16, 32, 64, 128],
            include_full: true,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub port: u16,
    pub session_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub reveal_returns: bool,
    /// Candidates shown per query and how many of them are ranked.
    pub m: usize,
    pub k: usize,
    /// Rollouts drawn per candidate.
    pub episodes: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        let t = ptdt_rankserve::human_tuner_defaults();
        Self {
            port: 8080,
            session_dir: None,
            ui_dir: None,
            reveal_returns: false,
            m: t.m,
            k: t.k,
            episodes: 3,
        }
    }
}
