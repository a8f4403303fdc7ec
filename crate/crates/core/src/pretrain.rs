//! Multi-task pretraining and the full fine-tuning baseline.
//!
//! Pretraining visits the training tasks round robin: each inner step takes
//! one optimizer step per task on a batch of (prompt, history window) pairs
//! drawn from that task's data, with prompts cut from the task's expert
//! episodes.

use std::path::Path;
use std::time::Instant;

use ptdt_diffcore::{AdamW, AdamWState, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::append_jsonl;
use crate::dtmodel::{dt_loss, Checkpoint, ModelConfig, ModelParams, Normalizer};
use crate::envs::{Quality, TaskSpec};
use crate::eval::evaluate;
use crate::seeds::derive_seed;
use crate::trajdata::{sample_prompt, sample_window, window_batch, EpisodeSet, PromptSegment, SequenceBatch, Window};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamW::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub steps_per_iter: usize,
    pub batch_per_task: usize,
    pub optim: OptimConfig,
    /// Quality of the episodes prompts are cut from; `None` for any.
    pub prompt_quality: Option<Quality>,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            steps_per_iter: 10,
            batch_per_task: 32,
            optim: OptimConfig::default(),
            prompt_quality: Some(Quality::Expert),
            eval_every: 0,
            eval_episodes: 5,
            seed: 0,
        }
    }
}

/// One training task with its offline data.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskSpec,
    pub data: EpisodeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean loss per task over the iteration's inner steps.
    pub task_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_returns: Option<Vec<f64>>,
    pub wall_ms: u128,
    pub seed: u64,
}

/// Input scaling from all training data: state moments, and an rtg scale
/// equal to the largest mean return magnitude among the expert and random
/// episodes of any task.
pub fn fit_normalizer(tasks: &[TaskData]) -> Result<Normalizer> {
    let mut all = EpisodeSet::default();
    let mut scale = 0.0f64;
    for t in tasks {
        all.episodes.extend(t.data.episodes.iter().cloned());
        for q in [Quality::Expert, Quality::Random] {
            let eps: Vec<f64> = t
                .data
                .episodes
                .iter()
                .filter(|e| e.quality == q)
                .map(|e| e.total_return())
                .collect();
            if !eps.is_empty() {
                scale = scale.max((eps.iter().sum::<f64>() / eps.len() as f64).abs());
            }
        }
    }
    let (state_mean, state_std) = all.state_stats()?;
    if scale == 0.0 {
        scale = all.episodes.iter().map(|e| e.total_return().abs()).fold(0.0, f64::max);
    }
    Ok(Normalizer {
        state_mean,
        state_std,
        rtg_scale: if scale > 0.0 { scale as f32 } else { 1.0 },
    })
}

/// One gradient step on `batch`; returns the loss before the update.
pub fn train_step(
    ckpt: &mut Checkpoint,
    batch: &SequenceBatch,
    opt: &AdamW,
    state: &mut AdamWState<f32>,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = ckpt.params.on_graph(&mut g, true);
    let loss = dt_loss(&mut g, &vars, &ckpt.config, &ckpt.norm, batch)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    let grads = ModelParams::collect_grads(&grads, &vars)?;
    opt.step(&mut ckpt.params.tensors, &grads, state)?;
    Ok(value)
}

fn task_batch(td: &TaskData, cfg: &ModelConfig, n: usize, quality: Option<Quality>, rng: &mut ChaCha8Rng) -> Result<SequenceBatch> {
    let quality = quality.filter(|q| td.data.episodes.iter().any(|e| e.quality == *q));
    let mut prompts: Vec<PromptSegment> = Vec::with_capacity(n);
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        prompts.push(if cfg.k_star == 0 {
            PromptSegment::empty(cfg.d_s, cfg.d_a)
        } else {
            sample_prompt(&td.data, td.task.task_index, cfg.k_star, quality, rng)?
        });
        let episode = rand::Rng::gen_range(rng, 0..td.data.len());
        let (start, end) = sample_window(&td.data.episodes[episode], cfg.k, rng);
        windows.push(Window { episode, start, end });
    }
    let refs: Vec<&PromptSegment> = prompts.iter().collect();
    window_batch(&td.data, &windows, &refs, cfg.k, cfg.prompt_loss)
}

/// Expert prompt and target used for evaluation snapshots during training.
fn snapshot_prompt(td: &TaskData, cfg: &ModelConfig, seed: u64) -> Result<(PromptSegment, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let experts: Vec<f64> = td
        .data
        .episodes
        .iter()
        .filter(|e| e.quality == Quality::Expert)
        .map(|e| e.total_return())
        .collect();
    let target = if experts.is_empty() {
        td.data.episodes.iter().map(|e| e.total_return()).fold(f64::MIN, f64::max)
    } else {
        experts.iter().sum::<f64>() / experts.len() as f64
    };
    let prompt = if cfg.k_star == 0 {
        PromptSegment::empty(cfg.d_s, cfg.d_a)
    } else {
        let q = (!experts.is_empty()).then_some(Quality::Expert);
        sample_prompt(&td.data, td.task.task_index, cfg.k_star, q, &mut rng)?
    };
    Ok((prompt, target as f32))
}

/// Pretrains a fresh model on every task of `tasks`. Log rows are returned
/// and, if `log_path` is given, appended there as JSON Lines.
pub fn train_multitask(
    tasks: &[TaskData],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    log_path: Option<&Path>,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    if tasks.is_empty() {
        return Err(Error::Data("pretraining needs at least one task".into()));
    }
    if let Some(td) = tasks.iter().find(|t| t.data.is_empty()) {
        return Err(Error::Data(format!("task {} has no episodes", td.task.task_index)));
    }
    let norm = fit_normalizer(tasks)?;
    let mut ckpt = Checkpoint::new(model.clone(), norm, derive_seed(cfg.seed, &[0x1417]))?;
    ckpt.lineage.note = format!("pretrained on {} tasks", tasks.len());
    let opt = cfg.optim.adamw();
    let mut state = AdamWState::new(&ckpt.params.tensors);
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut losses = vec![0.0; tasks.len()];
        for step in 0..cfg.steps_per_iter {
            for (ti, td) in tasks.iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[iteration as u64, step as u64, ti as u64]));
                let batch = task_batch(td, model, cfg.batch_per_task, cfg.prompt_quality, &mut rng)?;
                losses[ti] += train_step(&mut ckpt, &batch, &opt, &mut state)? / cfg.steps_per_iter as f64;
            }
        }
        let eval_returns = if cfg.eval_every > 0 && (iteration + 1) % cfg.eval_every == 0 {
            let mut returns = Vec::new();
            for td in tasks {
                let (prompt, target) = snapshot_prompt(td, model, cfg.seed)?;
                returns.push(evaluate(&ckpt, &prompt, &td.task, cfg.eval_episodes, target, cfg.seed)?.mean);
            }
            Some(returns)
        } else {
            None
        };
        let row = LogRow {
            iteration,
            task_loss: losses,
            eval_returns,
            wall_ms: started.elapsed().as_millis(),
            seed: cfg.seed,
        };
        if let Some(path) = log_path {
            append_jsonl(path, &row)?;
        }
        log.push(row);
    }
    if !ckpt.params.is_finite() {
        return Err(Error::Contract("training diverged to non-finite parameters".into()));
    }
    Ok((ckpt, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 160,
            batch_size: 32,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Distinct windows that took part in at least one step.
    pub touched: usize,
    pub losses: Vec<f64>,
}

/// Gradient steps on all parameters using only `windows` of `data`, paired
/// with a fixed `prompt`. Windows are visited in reshuffled passes, so once
/// `steps * batch_size` reaches the window count every window is used.
pub fn finetune_full(
    ckpt: &Checkpoint,
    data: &EpisodeSet,
    windows: &[Window],
    prompt: &PromptSegment,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mut out = ckpt.clone();
    out.lineage.parent = Some(ckpt.content_hash());
    out.lineage.note = format!("full fine-tune on {} windows", windows.len());
    if cfg.steps == 0 {
        return Ok(FinetuneOutcome {
            checkpoint: ckpt.clone(),
            touched: 0,
            losses: Vec::new(),
        });
    }
    if windows.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one window".into()));
    }
    let opt = cfg.optim.adamw();
    let mut state = AdamWState::new(&out.params.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xF1]));
    let mut order: Vec<usize> = Vec::new();
    let mut touched = vec![false; windows.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(windows.len()) {
            if order.is_empty() {
                order = (0..windows.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().expect("refilled"));
        }
        for &i in &picked {
            touched[i] = true;
        }
        let ws: Vec<Window> = picked.iter().map(|&i| windows[i]).collect();
        let batch = window_batch(data, &ws, &[prompt], out.config.k, out.config.prompt_loss)?;
        losses.push(train_step(&mut out, &batch, &opt, &mut state)?);
    }
    Ok(FinetuneOutcome {
        checkpoint: out,
        touched: touched.iter().filter(|&&t| t).count(),
        losses,
    })
}
