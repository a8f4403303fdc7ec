//! Adaptation methods on a held-out task and the sweeps built from them.
//!
//! Every method of one trial sees the same sample windows, the same initial
//! prompt and the same evaluation seeds, so rows with equal `seed` are paired.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Baseline, EvalResult};
use crate::dtmodel::Checkpoint;
use crate::envs::{Quality, TaskSpec};
use crate::pretrain::{finetune_full, FinetuneConfig};
use crate::seeds::derive_seed;
use crate::trajdata::{all_windows, flatten_prompt, sample_prompt, sample_windows, EpisodeSet, PromptSegment, Window};
use crate::zorank::{
    normalized_prompt_scale, tune_prompt, OfflineLossOracle, OnlineReturnOracle, TuneTrace, TunerConfig,
};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The pretrained model with the initial prompt, no adaptation.
    PromptDt,
    PtdtOffline,
    PtdtOnline,
    /// Full-model fine-tuning on the sample windows.
    PromptDtFt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PromptDt => "prompt-dt",
            Method::PtdtOffline => "ptdt-offline",
            Method::PtdtOnline => "ptdt-online",
            Method::PromptDtFt => "prompt-dt-ft",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by every adaptation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub tuner: TunerConfig,
    pub finetune: FinetuneConfig,
    /// Evaluation batches per offline oracle value, and their size.
    pub offline_batches: usize,
    pub offline_batch_size: usize,
    /// Rollout episodes per online oracle value.
    pub online_episodes: usize,
    pub eval_episodes: usize,
    /// Perturb in normalized input units instead of raw prompt values.
    pub scaled_perturbation: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            tuner: TunerConfig::default(),
            finetune: FinetuneConfig::default(),
            offline_batches: 8,
            offline_batch_size: 32,
            online_episodes: 10,
            eval_episodes: 50,
            scaled_perturbation: false,
        }
    }
}

/// One adaptation problem: a frozen checkpoint, a held-out task, the limited
/// sample set and the prompt to start from.
#[derive(Debug, Clone, Copy)]
pub struct Trial<'a> {
    pub ckpt: &'a Checkpoint,
    pub task: &'a TaskSpec,
    pub baseline: &'a Baseline,
    pub samples: &'a EpisodeSet,
    pub windows: &'a [Window],
    pub prompt: &'a PromptSegment,
    pub cfg: &'a AdaptConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub eval: EvalResult,
    pub normalized: f64,
    /// Sample windows the method was allowed to read (episodes for the
    /// online oracle).
    pub n_samples: usize,
    pub prompt: PromptSegment,
    pub trace: Option<TuneTrace>,
}

impl Trial<'_> {
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, &[0xE0])
    }

    fn tuner(&self) -> TunerConfig {
        let mut t = self.cfg.tuner.clone();
        t.seed = derive_seed(self.seed, &[0x7E]);
        if self.cfg.scaled_perturbation {
            t.scale = Some(normalized_prompt_scale(self.ckpt, &self.prompt.layout()));
        }
        t
    }

    fn evaluate_with(&self, ckpt: &Checkpoint, prompt: &PromptSegment) -> Result<(EvalResult, f64)> {
        let eval = evaluate(
            ckpt,
            prompt,
            self.task,
            self.cfg.eval_episodes,
            self.baseline.target_rtg(),
            self.eval_seed(),
        )?;
        let normalized = self.baseline.normalized(eval.mean)?;
        Ok((eval, normalized))
    }

    pub fn run(&self, method: Method) -> Result<MethodResult> {
        let (ckpt, prompt, trace, n_samples) = match method {
            Method::PromptDt => (None, self.prompt.clone(), None, 0),
            Method::PtdtOffline => {
                let mut oracle =
                    OfflineLossOracle::new(self.ckpt, self.samples, self.windows.to_vec(), flatten_prompt(self.prompt))?;
                oracle.batches = self.cfg.offline_batches;
                oracle.batch_size = self.cfg.offline_batch_size;
                oracle.seed = derive_seed(self.seed, &[0x0F]);
                let tuned = tune_prompt(self.ckpt, self.prompt, &mut oracle, &self.tuner(), None)?;
                let used = self.windows.len().min(oracle.batches * oracle.batch_size);
                (None, tuned.prompt, Some(tuned.trace), used)
            }
            Method::PtdtOnline => {
                let cfg = self.tuner();
                let mut oracle = OnlineReturnOracle {
                    ckpt: self.ckpt,
                    task: self.task,
                    template: flatten_prompt(self.prompt),
                    episodes: self.cfg.online_episodes,
                    target_rtg: self.baseline.target_rtg(),
                    seed: derive_seed(self.seed, &[0x0E]),
                    common_seeds: true,
                };
                let tuned = tune_prompt(self.ckpt, self.prompt, &mut oracle, &cfg, None)?;
                let used = cfg.t * cfg.m * self.cfg.online_episodes;
                (None, tuned.prompt, Some(tuned.trace), used)
            }
            Method::PromptDtFt => {
                let mut ft = self.cfg.finetune.clone();
                ft.seed = derive_seed(self.seed, &[0xF7]);
                let out = finetune_full(self.ckpt, self.samples, self.windows, self.prompt, &ft)?;
                (Some(out.checkpoint), self.prompt.clone(), None, self.windows.len())
            }
        };
        let (eval, normalized) = self.evaluate_with(ckpt.as_ref().unwrap_or(self.ckpt), &prompt)?;
        Ok(MethodResult {
            method,
            eval,
            normalized,
            n_samples,
            prompt,
            trace,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Samples,
    PromptInit,
    PromptLength,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samples" => Ok(Self::Samples),
            "prompt-init" => Ok(Self::PromptInit),
            "prompt-length" => Ok(Self::PromptLength),
            _ => Err(Error::Contract(format!("unknown ablation kind {s:?}"))),
        }
    }
}

/// One results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub kind: AblationKind,
    pub method: Method,
    pub task: String,
    pub seed: u64,
    /// Requested sample count; `None` means all windows of the data.
    pub size: Option<usize>,
    pub k_star: usize,
    pub prompt_quality: Quality,
    pub data_quality: Quality,
    pub n_samples: usize,
    pub raw: f64,
    pub raw_std: f64,
    pub normalized: f64,
}

/// Everything a sweep needs about the held-out task.
#[derive(Debug, Clone, Copy)]
pub struct Sweep<'a> {
    pub task: &'a TaskSpec,
    pub baseline: &'a Baseline,
    /// The task's full offline data, random through expert.
    pub data: &'a EpisodeSet,
    pub cfg: &'a AdaptConfig,
    pub seeds: &'a [u64],
    pub config_hash: Option<&'a str>,
}

/// Initial prompt of quality `q` from the task's data.
pub fn initial_prompt(ckpt: &Checkpoint, task: &TaskSpec, data: &EpisodeSet, q: Quality, seed: u64) -> Result<PromptSegment> {
    let cfg = &ckpt.config;
    if cfg.k_star == 0 {
        return Ok(PromptSegment::empty(cfg.d_s, cfg.d_a));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9A, q as u64]));
    sample_prompt(data, task.task_index, cfg.k_star, Some(q), &mut rng)
}

/// Sample windows for a trial: `size` distinct windows of the quality-`q`
/// part of `data`, or all of them in shuffled order when `size` is `None`.
pub fn sample_set(data: &EpisodeSet, q: Quality, size: Option<usize>, k: usize, seed: u64) -> Result<(EpisodeSet, Vec<Window>)> {
    let part = data.of_quality(q);
    if part.is_empty() {
        return Err(Error::Data(format!("no {q} episodes in the target data")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A, size.unwrap_or(0) as u64, q as u64]));
    let windows = match size {
        Some(n) => sample_windows(&part, n, k, &mut rng)?,
        // Shuffled, so a truncating consumer sees windows from every episode.
        None => {
            let mut all = all_windows(&part, k);
            all.shuffle(&mut rng);
            all
        }
    };
    Ok((part, windows))
}

impl Sweep<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        kind: AblationKind,
        res: &MethodResult,
        seed: u64,
        size: Option<usize>,
        k_star: usize,
        pq: Quality,
        dq: Quality,
    ) -> AblationRow {
        AblationRow {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.map(str::to_string),
            kind,
            method: res.method,
            task: super::BaselineTable::key(self.task),
            seed,
            size,
            k_star,
            prompt_quality: pq,
            data_quality: dq,
            n_samples: res.n_samples,
            raw: res.eval.mean,
            raw_std: res.eval.std,
            normalized: res.normalized,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn trial_rows(
        &self,
        ckpt: &Checkpoint,
        kind: AblationKind,
        methods: &[Method],
        seed: u64,
        size: Option<usize>,
        pq: Quality,
        dq: Quality,
    ) -> Result<Vec<AblationRow>> {
        let prompt = initial_prompt(ckpt, self.task, self.data, pq, seed)?;
        let (samples, windows) = sample_set(self.data, dq, size, ckpt.config.k, seed)?;
        let trial = Trial {
            ckpt,
            task: self.task,
            baseline: self.baseline,
            samples: &samples,
            windows: &windows,
            prompt: &prompt,
            cfg: self.cfg,
            seed,
        };
        methods
            .iter()
            .map(|&m| Ok(self.row(kind, &trial.run(m)?, seed, size, ckpt.config.k_star, pq, dq)))
            .collect()
    }

    /// PTDT-offline against full fine-tuning at each sample budget; `None`
    /// in `sizes` stands for all available windows.
    pub fn samples(&self, ckpt: &Checkpoint, sizes: &[Option<usize>], pq: Quality, dq: Quality) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &seed in self.seeds {
            for &size in sizes {
                rows.extend(self.trial_rows(
                    ckpt,
                    AblationKind::Samples,
                    &[Method::PtdtOffline, Method::PromptDtFt],
                    seed,
                    size,
                    pq,
                    dq,
                )?);
            }
        }
        Ok(rows)
    }

    /// The prompt-quality by data-quality grid for PTDT-offline and full
    /// fine-tuning.
    pub fn prompt_init(&self, ckpt: &Checkpoint, size: Option<usize>) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &seed in self.seeds {
            for pq in Quality::ALL {
                for dq in Quality::ALL {
                    rows.extend(self.trial_rows(
                        ckpt,
                        AblationKind::PromptInit,
                        &[Method::PtdtOffline, Method::PromptDtFt],
                        seed,
                        size,
                        pq,
                        dq,
                    )?);
                }
            }
        }
        Ok(rows)
    }

    /// Untuned against tuned prompts for checkpoints pretrained with
    /// different prompt lengths.
    pub fn prompt_length(
        &self,
        ckpts: &[&Checkpoint],
        size: Option<usize>,
        pq: Quality,
        dq: Quality,
    ) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &seed in self.seeds {
            for ckpt in ckpts {
                rows.extend(self.trial_rows(
                    ckpt,
                    AblationKind::PromptLength,
                    &[Method::PromptDt, Method::PtdtOffline],
                    seed,
                    size,
                    pq,
                    dq,
                )?);
            }
        }
        Ok(rows)
    }
}

/// Mean of `normalized` over rows matching `keep`.
pub fn mean_normalized(rows: &[AblationRow], keep: impl Fn(&AblationRow) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| keep(r)).map(|r| r.normalized).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
