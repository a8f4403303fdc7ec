//! Trajectory data: episodes, reward-to-go, prompt sampling, model input
//! assembly, prompt flattening and the JSON Lines dataset format.
//!
//! Arrays are stored flat in row-major order: an episode of length `T` with
//! `d_s`-dimensional states holds `T * d_s` state values.

use std::path::Path;

use ptdt_diffcore::DiffError;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{parse_jsonl, write_bytes};
use crate::envs::{Family, Quality, TaskSpec};
use crate::{Error, Result, FORMAT_VERSION};

/// Suffix sums: `rtg[t] = rewards[t] + rtg[t + 1]`.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0f32;
    for (out, &r) in rtg.iter_mut().zip(rewards).rev() {
        acc += r;
        *out = acc;
    }
    rtg
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_index: usize,
    pub family: Family,
    pub task_param: Vec<f32>,
    pub quality: Quality,
    pub seed: u64,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub rtg: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl Episode {
    pub fn new(
        task: &TaskSpec,
        quality: Quality,
        seed: u64,
        states: Vec<Vec<f32>>,
        actions: Vec<Vec<f32>>,
        rewards: Vec<f32>,
    ) -> Result<Self> {
        let (d_s, d_a) = (task.family.state_dim(), task.family.action_dim());
        let n = rewards.len();
        if states.len() != n || actions.len() != n {
            return Err(Error::Data(format!(
                "episode arrays disagree: {} states, {} actions, {n} rewards",
                states.len(),
                actions.len()
            )));
        }
        if states.iter().any(|s| s.len() != d_s) || actions.iter().any(|a| a.len() != d_a) {
            return Err(Error::Data(format!(
                "{} episodes need {d_s}-dimensional states and {d_a}-dimensional actions",
                task.family
            )));
        }
        Ok(Self {
            task_index: task.task_index,
            family: task.family,
            task_param: task.task_param.clone(),
            quality,
            seed,
            states: states.concat(),
            actions: actions.concat(),
            rtg: compute_rtg(&rewards),
            rewards,
            timesteps: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.family.state_dim()
    }

    pub fn d_a(&self) -> usize {
        self.family.action_dim()
    }

    pub fn state(&self, t: usize) -> &[f32] {
        let d = self.d_s();
        &self.states[t * d..(t + 1) * d]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        let d = self.d_a();
        &self.actions[t * d..(t + 1) * d]
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Steps `start..end` as a history window with all actions present.
    pub fn window(&self, start: usize, end: usize) -> History {
        let (d_s, d_a) = (self.d_s(), self.d_a());
        History {
            d_s,
            d_a,
            rtg: self.rtg[start..end].to_vec(),
            states: self.states[start * d_s..end * d_s].to_vec(),
            actions: self.actions[start * d_a..end * d_a].to_vec(),
            timesteps: self.timesteps[start..end].to_vec(),
        }
    }
}

/// On-disk form of one episode.
#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    task_index: usize,
    family: Family,
    task_param: Vec<f32>,
    quality: Quality,
    seed: u64,
    states: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    rewards: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeSet {
    pub episodes: Vec<Episode>,
    /// Hash of the configuration that produced the data, if known.
    pub config_hash: Option<String>,
}

impl EpisodeSet {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self {
            episodes,
            config_hash: None,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn extend(&mut self, other: EpisodeSet) {
        self.episodes.extend(other.episodes);
    }

    pub fn for_task(&self, task_index: usize) -> EpisodeSet {
        EpisodeSet {
            episodes: self
                .episodes
                .iter()
                .filter(|e| e.task_index == task_index)
                .cloned()
                .collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Episodes generated by a policy of quality `q`, in order.
    pub fn of_quality(&self, q: Quality) -> EpisodeSet {
        EpisodeSet {
            episodes: self.episodes.iter().filter(|e| e.quality == q).cloned().collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Contiguous slice of episodes `start..start + n` (clamped).
    pub fn slice(&self, start: usize, n: usize) -> EpisodeSet {
        let start = start.min(self.len());
        let end = (start + n).min(self.len());
        EpisodeSet {
            episodes: self.episodes[start..end].to_vec(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(Episode::total_return).sum::<f64>() / self.len().max(1) as f64
    }

    /// Per-dimension mean and standard deviation of all states, with the
    /// deviation floored at `1e-3`.
    pub fn state_stats(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let first = self
            .episodes
            .first()
            .ok_or_else(|| Error::Data("no episodes to compute state statistics from".into()))?;
        let d = first.d_s();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for ep in &self.episodes {
            for s in ep.states.chunks(d) {
                for i in 0..d {
                    sum[i] += s[i] as f64;
                    sq[i] += (s[i] as f64).powi(2);
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok((mean, std))
    }

    /// JSON Lines text, one episode per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ep in &self.episodes {
            let record = EpisodeRecord {
                format_version: FORMAT_VERSION,
                config_hash: self.config_hash.clone(),
                task_index: ep.task_index,
                family: ep.family,
                task_param: ep.task_param.clone(),
                quality: ep.quality,
                seed: ep.seed,
                states: ep.states.chunks(ep.d_s()).map(<[f32]>::to_vec).collect(),
                actions: ep.actions.chunks(ep.d_a()).map(<[f32]>::to_vec).collect(),
                rewards: ep.rewards.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("episode serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let records: Vec<EpisodeRecord> = parse_jsonl(path, text)?;
        let mut set = EpisodeSet::default();
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, _)| i + 1);
        for (record, line) in records.into_iter().zip(lines) {
            if record.format_version != FORMAT_VERSION {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    found: record.format_version,
                    expected: FORMAT_VERSION,
                });
            }
            let task = TaskSpec {
                family: record.family,
                task_param: record.task_param,
                task_index: record.task_index,
                horizon: record.rewards.len(),
            };
            let ep = Episode::new(
                &task,
                record.quality,
                record.seed,
                record.states,
                record.actions,
                record.rewards,
            )
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            set.config_hash = set.config_hash.or(record.config_hash);
            set.episodes.push(ep);
        }
        Ok(set)
    }
}

/// Where a prompt segment was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSource {
    /// Index of the episode within the dataset it was sampled from.
    pub episode: usize,
    pub task_index: usize,
    pub quality: Quality,
    pub start: usize,
    pub len: usize,
}

/// A `K*`-step trajectory prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub d_s: usize,
    pub d_a: usize,
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    pub sources: Vec<SegmentSource>,
}

impl PromptSegment {
    /// The zero-length prompt used by the prompt-free ablation.
    pub fn empty(d_s: usize, d_a: usize) -> Self {
        Self {
            d_s,
            d_a,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn from_episode(ep: &Episode, episode: usize, start: usize, len: usize) -> Self {
        let (d_s, d_a) = (ep.d_s(), ep.d_a());
        let end = start + len;
        Self {
            d_s,
            d_a,
            rtg: ep.rtg[start..end].to_vec(),
            states: ep.states[start * d_s..end * d_s].to_vec(),
            actions: ep.actions[start * d_a..end * d_a].to_vec(),
            timesteps: ep.timesteps[start..end].to_vec(),
            sources: vec![SegmentSource {
                episode,
                task_index: ep.task_index,
                quality: ep.quality,
                start,
                len,
            }],
        }
    }

    pub fn k_star(&self) -> usize {
        self.rtg.len()
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            d_r: 1,
            d_s: self.d_s,
            d_a: self.d_a,
            k_star: self.k_star(),
        }
    }

    fn append(&mut self, other: PromptSegment) {
        self.rtg.extend(other.rtg);
        self.states.extend(other.states);
        self.actions.extend(other.actions);
        self.timesteps.extend(other.timesteps);
        self.sources.extend(other.sources);
    }
}

/// Uniformly random episode of `task_index` (optionally of one quality)
/// and a uniformly random contiguous window of `k_star` steps from it.
pub fn sample_prompt(
    set: &EpisodeSet,
    task_index: usize,
    k_star: usize,
    quality: Option<Quality>,
    rng: &mut impl Rng,
) -> Result<PromptSegment> {
    let eligible: Vec<usize> = set
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.task_index == task_index && e.len() >= k_star.max(1) && quality.map_or(true, |q| e.quality == q)
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no episode of task {task_index}{} with at least {k_star} steps",
            quality.map(|q| format!(" and quality {q}")).unwrap_or_default()
        )));
    }
    let idx = eligible[rng.gen_range(0..eligible.len())];
    let ep = &set.episodes[idx];
    let start = rng.gen_range(0..=ep.len() - k_star);
    Ok(PromptSegment::from_episode(ep, idx, start, k_star))
}

/// Prompt built from `n_segments` independently sampled segments whose
/// lengths add up to `k_star`.
pub fn sample_prompt_segments(
    set: &EpisodeSet,
    task_index: usize,
    k_star: usize,
    n_segments: usize,
    quality: Option<Quality>,
    rng: &mut impl Rng,
) -> Result<PromptSegment> {
    if n_segments == 0 || n_segments > k_star.max(1) {
        return Err(Error::Contract(format!(
            "cannot split a {k_star}-step prompt into {n_segments} segments"
        )));
    }
    let mut out: Option<PromptSegment> = None;
    for j in 0..n_segments {
        let len = k_star / n_segments + usize::from(j < k_star % n_segments);
        let seg = sample_prompt(set, task_index, len, quality, rng)?;
        match out.as_mut() {
            Some(p) => p.append(seg),
            None => out = Some(seg),
        }
    }
    Ok(out.expect("at least one segment"))
}

/// Dimensions of a flattened prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub d_r: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub k_star: usize,
}

impl PromptLayout {
    pub fn step_width(&self) -> usize {
        self.d_r + self.d_s + self.d_a
    }

    pub fn d_x(&self) -> usize {
        self.step_width() * self.k_star
    }
}

/// A prompt as one real vector, step by step `rtg || state || action`.
///
/// Timesteps and provenance ride along untouched; only `x` is tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatPrompt {
    pub layout: PromptLayout,
    pub x: Vec<f64>,
    pub timesteps: Vec<usize>,
    #[serde(default)]
    pub sources: Vec<SegmentSource>,
}

pub fn flatten_prompt(p: &PromptSegment) -> FlatPrompt {
    let layout = p.layout();
    let mut x = Vec::with_capacity(layout.d_x());
    for t in 0..layout.k_star {
        x.push(p.rtg[t] as f64);
        x.extend(p.states[t * p.d_s..(t + 1) * p.d_s].iter().map(|&v| v as f64));
        x.extend(p.actions[t * p.d_a..(t + 1) * p.d_a].iter().map(|&v| v as f64));
    }
    FlatPrompt {
        layout,
        x,
        timesteps: p.timesteps.clone(),
        sources: p.sources.clone(),
    }
}

pub fn unflatten_prompt(flat: &FlatPrompt) -> Result<PromptSegment> {
    let layout = flat.layout;
    if layout.d_r != 1 {
        return Err(Error::Contract(format!("rtg tokens are scalar, layout has d_r = {}", layout.d_r)));
    }
    if flat.x.len() != layout.d_x() || flat.timesteps.len() != layout.k_star {
        return Err(DiffError::shape(
            "unflatten_prompt",
            &[layout.k_star, layout.step_width()],
            &[flat.x.len()],
        )
        .into());
    }
    let mut p = PromptSegment::empty(layout.d_s, layout.d_a);
    for step in flat.x.chunks(layout.step_width()) {
        p.rtg.push(step[0] as f32);
        p.states.extend(step[1..1 + layout.d_s].iter().map(|&v| v as f32));
        p.actions.extend(step[1 + layout.d_s..].iter().map(|&v| v as f32));
    }
    p.timesteps = flat.timesteps.clone();
    p.sources = flat.sources.clone();
    Ok(p)
}

/// The most recent steps of an episode in progress, oldest first.
///
/// `actions` may hold one step fewer than the rest: the final state is then
/// the one an action is being requested for.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub d_s: usize,
    pub d_a: usize,
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl History {
    pub fn new(d_s: usize, d_a: usize) -> Self {
        Self {
            d_s,
            d_a,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len() / self.d_a
    }

    pub fn push_observation(&mut self, rtg: f32, state: &[f32], t: usize) {
        self.rtg.push(rtg);
        self.states.extend_from_slice(state);
        self.timesteps.push(t);
    }

    pub fn push_action(&mut self, action: &[f32]) {
        self.actions.extend_from_slice(action);
    }

    /// Drops everything but the last `k` steps.
    pub fn truncate_front(&mut self, k: usize) {
        let n = self.len();
        if n <= k {
            return;
        }
        let drop = n - k;
        let dropped_actions = drop.min(self.n_actions());
        self.rtg.drain(..drop);
        self.states.drain(..drop * self.d_s);
        self.timesteps.drain(..drop);
        self.actions.drain(..dropped_actions * self.d_a);
    }
}

/// A uniformly placed training window of at most `k` steps: the end step is
/// uniform over the episode, so short windows near the episode start occur
/// as they do during inference.
pub fn sample_window(ep: &Episode, k: usize, rng: &mut impl Rng) -> (usize, usize) {
    let end = rng.gen_range(1..=ep.len());
    (end.saturating_sub(k), end)
}

/// A training or evaluation window: steps `start..end` of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

/// `n` distinct windows of at most `k` steps, each placed like
/// [`sample_window`] in a uniformly chosen episode of `set`.
pub fn sample_windows(set: &EpisodeSet, n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Window>> {
    let available: usize = set.episodes.iter().map(Episode::len).sum();
    if n > available {
        return Err(Error::Data(format!(
            "asked for {n} distinct windows but the data only has {available}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let episode = rng.gen_range(0..set.len());
        let (start, end) = sample_window(&set.episodes[episode], k, rng);
        let w = Window { episode, start, end };
        if seen.insert(w) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Every window of at most `k` steps in `set`, one per end step.
pub fn all_windows(set: &EpisodeSet, k: usize) -> Vec<Window> {
    set.episodes
        .iter()
        .enumerate()
        .flat_map(|(episode, ep)| {
            (1..=ep.len()).map(move |end| Window {
                episode,
                start: end.saturating_sub(k),
                end,
            })
        })
        .collect()
}

/// Sequences pairing each window with a prompt (`prompts` is cycled).
pub fn window_batch(
    set: &EpisodeSet,
    windows: &[Window],
    prompts: &[&PromptSegment],
    k: usize,
    prompt_loss: bool,
) -> Result<SequenceBatch> {
    let first = prompts
        .first()
        .ok_or_else(|| Error::Contract("window batch needs a prompt".into()))?;
    let mut batch = SequenceBatch::new(first.k_star(), k, first.d_s, first.d_a);
    for (i, w) in windows.iter().enumerate() {
        let ep = set
            .episodes
            .get(w.episode)
            .ok_or_else(|| Error::Contract(format!("window refers to missing episode {}", w.episode)))?;
        batch.push(prompts[i % prompts.len()], &ep.window(w.start, w.end), prompt_loss)?;
    }
    Ok(batch)
}

/// Model input for `batch` sequences of `k_star` prompt steps followed by
/// `k` history steps. Step `i` of sequence `b` lives at `b * (k_star + k) + i`;
/// its three tokens sit at positions `3i` (rtg), `3i + 1` (state) and
/// `3i + 2` (action) of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub k_star: usize,
    pub k: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub rtg: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    /// Step holds real rtg and state tokens (false for left padding).
    pub valid: Vec<bool>,
    /// Step holds a real action token.
    pub has_action: Vec<bool>,
    /// Weight of the step's action prediction in the loss.
    pub loss_weight: Vec<f32>,
}

impl SequenceBatch {
    pub fn new(k_star: usize, k: usize, d_s: usize, d_a: usize) -> Self {
        Self {
            batch: 0,
            k_star,
            k,
            d_s,
            d_a,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
            valid: Vec::new(),
            has_action: Vec::new(),
            loss_weight: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.k_star + self.k
    }

    pub fn tokens_per_sequence(&self) -> usize {
        3 * self.steps()
    }

    /// Tokens of sequence `b` that are not padding.
    pub fn real_tokens(&self, b: usize) -> usize {
        let l = self.steps();
        3 * self.valid[b * l..(b + 1) * l].iter().filter(|&&v| v).count()
    }

    /// Appends one sequence: the prompt, then the history left-padded to `k`
    /// steps. Loss weight 1 goes to history steps with an action, and to
    /// prompt steps as well when `prompt_loss` is set.
    pub fn push(&mut self, prompt: &PromptSegment, history: &History, prompt_loss: bool) -> Result<()> {
        if history.is_empty() {
            return Err(Error::Contract("history must hold at least one step".into()));
        }
        if prompt.k_star() != self.k_star || history.len() > self.k {
            return Err(DiffError::shape(
                "assemble_input",
                &[self.k_star, self.k],
                &[prompt.k_star(), history.len()],
            )
            .into());
        }
        if prompt.d_s != self.d_s || prompt.d_a != self.d_a || history.d_s != self.d_s || history.d_a != self.d_a {
            return Err(DiffError::shape(
                "assemble_input",
                &[self.d_s, self.d_a],
                &[history.d_s, history.d_a],
            )
            .into());
        }
        let n_actions = history.n_actions();
        if n_actions + 1 < history.len() || n_actions > history.len() {
            return Err(Error::Contract(format!(
                "history has {} steps but {n_actions} actions",
                history.len()
            )));
        }
        self.rtg.extend_from_slice(&prompt.rtg);
        self.states.extend_from_slice(&prompt.states);
        self.actions.extend_from_slice(&prompt.actions);
        self.timesteps.extend_from_slice(&prompt.timesteps);
        self.valid.extend(std::iter::repeat(true).take(self.k_star));
        self.has_action.extend(std::iter::repeat(true).take(self.k_star));
        let w = if prompt_loss { 1.0 } else { 0.0 };
        self.loss_weight.extend(std::iter::repeat(w).take(self.k_star));

        let pad = self.k - history.len();
        self.rtg.extend(std::iter::repeat(0.0).take(pad));
        self.states.extend(std::iter::repeat(0.0).take(pad * self.d_s));
        self.actions.extend(std::iter::repeat(0.0).take(pad * self.d_a));
        self.timesteps.extend(std::iter::repeat(0).take(pad));
        self.valid.extend(std::iter::repeat(false).take(pad));
        self.has_action.extend(std::iter::repeat(false).take(pad));
        self.loss_weight.extend(std::iter::repeat(0.0).take(pad));

        self.rtg.extend_from_slice(&history.rtg);
        self.states.extend_from_slice(&history.states);
        self.actions.extend_from_slice(&history.actions);
        self.actions
            .extend(std::iter::repeat(0.0).take((history.len() - n_actions) * self.d_a));
        self.timesteps.extend_from_slice(&history.timesteps);
        self.valid.extend(std::iter::repeat(true).take(history.len()));
        for i in 0..history.len() {
            let present = i < n_actions;
            self.has_action.push(present);
            self.loss_weight.push(if present { 1.0 } else { 0.0 });
        }
        self.batch += 1;
        Ok(())
    }
}

/// A one-sequence batch for inference or inspection.
pub fn assemble_input(prompt: &PromptSegment, history: &History, k: usize) -> Result<SequenceBatch> {
    let mut batch = SequenceBatch::new(prompt.k_star(), k, prompt.d_s, prompt.d_a);
    batch.push(prompt, history, false)?;
    Ok(batch)
}
