//! Rollouts of a checkpoint, evaluation statistics and score normalization.
//!
//! Rollouts run in lockstep: every live episode advances one step per model
//! call, so a whole evaluation (or every candidate of an oracle query) shares
//! batched forward passes. Results are always reported in job order.

pub mod ablate;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, write_json};
use crate::dtmodel::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{scripted_noise_seed, scripted_returns, EnvState, Quality, ScriptedPolicy, TaskSpec};
use crate::seeds::derive_seed;
use crate::trajdata::{History, PromptSegment};
use crate::{Error, Result};

/// Sequences per forward pass during lockstep rollouts.
const ROLLOUT_CHUNK: usize = 128;

/// One episode to roll out.
#[derive(Debug, Clone, Copy)]
pub struct RolloutJob<'a> {
    pub task: &'a TaskSpec,
    pub prompt: &'a PromptSegment,
    pub target_rtg: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Observations `s_0..s_T`, including the final one.
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
    pub total_return: f64,
}

/// Something that picks actions for a batch of live episodes.
pub trait Actor {
    /// Whether equal inputs always give equal actions. Only then may
    /// rollouts with identical jobs be shared.
    fn deterministic(&self) -> bool {
        true
    }

    /// Actions for the episodes `live` (indices into `jobs`), given each
    /// one's history and current environment state.
    fn act(
        &mut self,
        live: &[usize],
        jobs: &[RolloutJob<'_>],
        histories: &[&History],
        states: &[&EnvState],
    ) -> Result<Vec<Vec<f32>>>;
}

/// A frozen checkpoint acting on its prompt and the last `K` steps.
pub struct ModelActor<'a>(pub &'a Checkpoint);

impl Actor for ModelActor<'_> {
    fn act(
        &mut self,
        live: &[usize],
        jobs: &[RolloutJob<'_>],
        histories: &[&History],
        _states: &[&EnvState],
    ) -> Result<Vec<Vec<f32>>> {
        let prompts: Vec<&PromptSegment> = live.iter().map(|&i| jobs[i].prompt).collect();
        let hs: Vec<History> = histories.iter().map(|&h| h.clone()).collect();
        self.0.act_batch(&prompts, &hs)
    }
}

/// A scripted policy acting through the same harness. Each episode draws
/// its noise from the stream a dataset episode with the same seed uses, so
/// rollouts reproduce generated episodes exactly.
pub struct ScriptedActor {
    pub policy: ScriptedPolicy,
    rngs: BTreeMap<usize, ChaCha8Rng>,
}

impl ScriptedActor {
    pub fn new(policy: ScriptedPolicy) -> Self {
        Self {
            policy,
            rngs: BTreeMap::new(),
        }
    }
}

impl Actor for ScriptedActor {
    fn deterministic(&self) -> bool {
        self.policy.quality == Quality::Expert
    }

    fn act(
        &mut self,
        live: &[usize],
        jobs: &[RolloutJob<'_>],
        _histories: &[&History],
        states: &[&EnvState],
    ) -> Result<Vec<Vec<f32>>> {
        Ok(live
            .iter()
            .zip(states)
            .map(|(&i, state)| {
                let rng = self
                    .rngs
                    .entry(i)
                    .or_insert_with(|| ChaCha8Rng::seed_from_u64(scripted_noise_seed(jobs[i].seed)));
                self.policy.act(jobs[i].task, state, rng)
            })
            .collect())
    }
}

fn validate_jobs(ckpt: &Checkpoint, jobs: &[RolloutJob<'_>]) -> Result<()> {
    let cfg = &ckpt.config;
    for job in jobs {
        if job.task.family.state_dim() != cfg.d_s || job.task.family.action_dim() != cfg.d_a {
            return Err(Error::Contract(format!(
                "checkpoint expects d_s={} d_a={}, task is {}",
                cfg.d_s, cfg.d_a, job.task.family
            )));
        }
        if job.prompt.k_star() != cfg.k_star {
            return Err(Error::Contract(format!(
                "checkpoint expects prompts of {} steps, got {}",
                cfg.k_star,
                job.prompt.k_star()
            )));
        }
    }
    Ok(())
}

/// Runs every job to its horizon with the checkpoint acting.
pub fn rollout_batch(ckpt: &Checkpoint, jobs: &[RolloutJob<'_>]) -> Result<Vec<Rollout>> {
    validate_jobs(ckpt, jobs)?;
    rollout_with(&mut ModelActor(ckpt), jobs, ckpt.config.k)
}

/// Runs every job to its horizon; histories are cut to the last `k` steps.
pub fn rollout_with(actor: &mut dyn Actor, jobs: &[RolloutJob<'_>], k: usize) -> Result<Vec<Rollout>> {
    for job in jobs {
        job.task.validate()?;
    }
    let starts: Vec<EnvState> = jobs.iter().map(|j| j.task.reset(j.seed)).collect();
    if !actor.deterministic() {
        return rollout_distinct(actor, jobs, starts, k);
    }
    // Dynamics are deterministic, so with a deterministic actor, jobs that
    // agree on task, prompt, target and initial state produce identical
    // episodes. Each distinct job is simulated once.
    let mut unique: Vec<usize> = Vec::new();
    let mut source = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let same = unique.iter().position(|&u| {
            let other = &jobs[u];
            starts[u] == starts[i]
                && other.target_rtg.to_bits() == job.target_rtg.to_bits()
                && other.task == job.task
                && other.prompt == job.prompt
        });
        source.push(same.unwrap_or_else(|| {
            unique.push(i);
            unique.len() - 1
        }));
    }
    let unique_jobs: Vec<RolloutJob> = unique.iter().map(|&i| jobs[i]).collect();
    let unique_starts = unique.iter().map(|&i| starts[i].clone()).collect();
    let done = rollout_distinct(actor, &unique_jobs, unique_starts, k)?;
    Ok(source.into_iter().map(|u| done[u].clone()).collect())
}

fn rollout_distinct(
    actor: &mut dyn Actor,
    jobs: &[RolloutJob<'_>],
    mut envs: Vec<EnvState>,
    k: usize,
) -> Result<Vec<Rollout>> {
    let mut rtg: Vec<f32> = jobs.iter().map(|j| j.target_rtg).collect();
    let mut histories: Vec<History> = jobs
        .iter()
        .zip(&envs)
        .map(|(j, s)| {
            let d_s = j.task.family.state_dim();
            let mut h = History::new(d_s, j.task.family.action_dim());
            h.push_observation(j.target_rtg, &s.obs, 0);
            h
        })
        .collect();
    let mut out: Vec<Rollout> = envs
        .iter()
        .map(|s| Rollout {
            states: vec![s.obs.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            total_return: 0.0,
        })
        .collect();
    let max_horizon = jobs.iter().map(|j| j.task.horizon).max().unwrap_or(0);
    for t in 0..max_horizon {
        let live: Vec<usize> = (0..jobs.len()).filter(|&i| t < jobs[i].task.horizon).collect();
        for chunk in live.chunks(ROLLOUT_CHUNK) {
            let hs: Vec<&History> = chunk.iter().map(|&i| &histories[i]).collect();
            let ss: Vec<&EnvState> = chunk.iter().map(|&i| &envs[i]).collect();
            let actions = actor.act(chunk, jobs, &hs, &ss)?;
            if actions.len() != chunk.len() {
                return Err(Error::Contract(format!(
                    "actor returned {} actions for {} episodes",
                    actions.len(),
                    chunk.len()
                )));
            }
            for (&i, action) in chunk.iter().zip(actions) {
                let tr = jobs[i].task.step(&envs[i], &action)?;
                rtg[i] -= tr.reward;
                let h = &mut histories[i];
                h.push_action(&tr.action);
                h.push_observation(rtg[i], &tr.next_state.obs, t + 1);
                h.truncate_front(k);
                let r = &mut out[i];
                r.states.push(tr.next_state.obs.clone());
                r.actions.push(tr.action);
                r.rewards.push(tr.reward);
                r.total_return += tr.reward as f64;
                envs[i] = tr.next_state;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { mean, std, returns }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seed of evaluation episode `i`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[0xE7A1, i as u64])
}

/// `n_episodes` seeded rollouts with a fixed prompt.
pub fn evaluate(
    ckpt: &Checkpoint,
    prompt: &PromptSegment,
    task: &TaskSpec,
    n_episodes: usize,
    target_rtg: f32,
    seed: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let jobs: Vec<RolloutJob> = (0..n_episodes)
        .map(|i| RolloutJob {
            task,
            prompt,
            target_rtg,
            seed: episode_seed(seed, i),
        })
        .collect();
    let rollouts = rollout_batch(ckpt, &jobs)?;
    Ok(EvalResult::from_returns(rollouts.iter().map(|r| r.total_return).collect()))
}

/// Scripted-policy reference returns for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub task: TaskSpec,
    pub expert: f64,
    pub random: f64,
    pub medium: f64,
    pub episodes: usize,
}

impl Baseline {
    pub fn compute(task: &TaskSpec, medium_scale: f32, episodes: usize, seed: u64) -> Result<Self> {
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(Self {
            task: task.clone(),
            expert: mean(scripted_returns(task, &ScriptedPolicy::expert(), episodes, seed)?),
            random: mean(scripted_returns(task, &ScriptedPolicy::random(), episodes, seed)?),
            medium: mean(scripted_returns(task, &ScriptedPolicy::medium(medium_scale), episodes, seed)?),
            episodes,
        })
    }

    /// `100 * (raw - random) / (expert - random)`.
    pub fn normalized(&self, raw: f64) -> Result<f64> {
        normalized_score(raw, self.expert, self.random, &self.task.describe())
    }

    /// Expert-minus-random return gap.
    pub fn gap(&self) -> f64 {
        self.expert - self.random
    }

    /// Reward-to-go to condition evaluation rollouts on.
    pub fn target_rtg(&self) -> f32 {
        self.expert as f32
    }
}

pub fn normalized_score(raw: f64, expert: f64, random: f64, task: &str) -> Result<f64> {
    if expert == random {
        return Err(Error::DegenerateBaseline {
            task: task.to_string(),
            value: expert,
        });
    }
    Ok(100.0 * (raw - random) / (expert - random))
}

/// Baselines keyed by `"<family>/<task_index>"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub entries: BTreeMap<String, Baseline>,
}

impl BaselineTable {
    pub fn key(task: &TaskSpec) -> String {
        format!("{}/{}", task.family, task.task_index)
    }

    pub fn compute(tasks: &[TaskSpec], medium_scale: f32, episodes: usize, seed: u64) -> Result<Self> {
        let mut table = Self::default();
        for task in tasks {
            table
                .entries
                .insert(Self::key(task), Baseline::compute(task, medium_scale, episodes, seed)?);
        }
        Ok(table)
    }

    pub fn get(&self, task: &TaskSpec) -> Result<&Baseline> {
        self.entries
            .get(&Self::key(task))
            .ok_or_else(|| Error::Data(format!("no baseline for {}", Self::key(task))))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
