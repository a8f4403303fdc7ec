//! Ranking-oracle prompt tuning.
//!
//! Each iteration draws `m` standard-normal probes `xi_i`, queries an
//! `(m, k)` ranking oracle on the candidates `x + mu * xi_i`, turns the
//! answer into a DAG of "better than" edges and steps along
//!
//! ```text
//! g = (1 / |E|) * sum over (i, j) in E of (xi_j - xi_i)
//! x <- x - eta * g
//! ```
//!
//! The optimizer only ever sees a [`Ranking`]. Numeric oracles (prompt loss
//! on held-out windows, negated online return) reduce their values to a
//! ranking before the optimizer gets the answer; the values themselves go to
//! the trace for inspection only.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{parse_jsonl, write_bytes};
use crate::dtmodel::Checkpoint;
use crate::envs::TaskSpec;
use crate::eval::{episode_seed, evaluate, rollout_batch, Rollout, RolloutJob};
use crate::seeds::derive_seed;
use crate::trajdata::{flatten_prompt, unflatten_prompt, window_batch, EpisodeSet, FlatPrompt, PromptLayout, PromptSegment, Window};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    /// Iterations.
    pub t: usize,
    /// Candidates per query.
    pub m: usize,
    /// Length of the ranked prefix the oracle returns.
    pub k: usize,
    /// Perturbation scale.
    pub mu: f64,
    /// Step size.
    pub eta: f64,
    pub seed: u64,
    /// Optional per-coordinate scale applied to probes and updates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            t: 20,
            m: 15,
            k: 15,
            mu: 0.05,
            eta: 0.05,
            seed: 0,
            scale: None,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self, d_x: usize) -> Result<()> {
        if self.k == 0 || self.k > self.m {
            return Err(Error::Contract(format!("need 1 <= k <= m, got k={} m={}", self.k, self.m)));
        }
        if !(self.mu > 0.0) || !(self.eta > 0.0) {
            return Err(Error::Contract(format!(
                "mu and eta must be positive, got mu={} eta={}",
                self.mu, self.eta
            )));
        }
        if let Some(scale) = &self.scale {
            if scale.len() != d_x || scale.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Contract(format!(
                    "scale must hold {d_x} positive entries, got {}",
                    scale.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-coordinate scale that expresses prompt perturbations in the model's
/// normalized input units: rtg entries by the rtg scale, states by their
/// standard deviation, actions unscaled.
pub fn normalized_prompt_scale(ckpt: &Checkpoint, layout: &PromptLayout) -> Vec<f64> {
    let mut step = Vec::with_capacity(layout.step_width());
    step.extend(std::iter::repeat(ckpt.norm.rtg_scale as f64).take(layout.d_r));
    step.extend(ckpt.norm.state_std.iter().map(|&s| s as f64));
    step.extend(std::iter::repeat(1.0).take(layout.d_a));
    step.repeat(layout.k_star)
}

/// Candidates `x_prev + mu * scale * xi_i` and their probes `xi_i`.
pub fn perturb_candidates(
    x_prev: &[f64],
    m: usize,
    mu: f64,
    scale: Option<&[f64]>,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let probes: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..x_prev.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let candidates = probes
        .iter()
        .map(|xi| {
            x_prev
                .iter()
                .zip(xi)
                .enumerate()
                .map(|(d, (&x, &z))| x + mu * scale.map_or(1.0, |s| s[d]) * z)
                .collect()
        })
        .collect();
    (candidates, probes)
}

/// An `(m, k)` oracle answer: the `k` best candidates, best first.
///
/// `ties` lists pairs the oracle could not separate; no edge is drawn
/// between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub m: usize,
    pub order: Vec<usize>,
    #[serde(default)]
    pub ties: Vec<(usize, usize)>,
}

impl Ranking {
    /// Ranks by ascending value; equal values are ordered by index and
    /// recorded as ties.
    pub fn from_values(values: &[f64], k: usize) -> Result<Self> {
        let m = values.len();
        if k == 0 || k > m {
            return Err(Error::Contract(format!("need 1 <= k <= m, got k={k} m={m}")));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::Oracle(format!("candidate {i} has a NaN value")));
        }
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let order: Vec<usize> = idx[..k].to_vec();
        let mut ties = Vec::new();
        for (p, &i) in order.iter().enumerate() {
            for &j in &idx[p + 1..] {
                if values[i] == values[j] {
                    ties.push((i, j));
                }
            }
        }
        Ok(Self { m, order, ties })
    }

    /// A submitted order: `k` distinct indices below `m`, best first.
    pub fn from_order(order: Vec<usize>, m: usize, k: usize) -> Result<Self> {
        if order.len() != k {
            return Err(Error::Contract(format!("expected {k} ranked indices, got {}", order.len())));
        }
        let mut seen = HashSet::new();
        for &i in &order {
            if i >= m {
                return Err(Error::Contract(format!("candidate index {i} out of range 0..{m}")));
            }
            if !seen.insert(i) {
                return Err(Error::Contract(format!("candidate index {i} ranked twice")));
            }
        }
        Ok(Self {
            m,
            order,
            ties: Vec::new(),
        })
    }
}

/// Candidates as nodes, `(i, j)` meaning `i` ranked strictly better than `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingDag {
    pub m: usize,
    pub edges: Vec<(usize, usize)>,
    /// Whether every candidate was ranked.
    pub full: bool,
}

/// All edges implied by a ranking: between every ordered pair of ranked
/// candidates, and from every ranked candidate to every unranked one.
pub fn build_dag(ranking: &Ranking) -> RankingDag {
    let ranked: HashSet<usize> = ranking.order.iter().copied().collect();
    let tied = |a: usize, b: usize| ranking.ties.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
    let unranked: Vec<usize> = (0..ranking.m).filter(|i| !ranked.contains(i)).collect();
    let mut edges = Vec::new();
    for (p, &i) in ranking.order.iter().enumerate() {
        for &j in ranking.order[p + 1..].iter().chain(&unranked) {
            if !tied(i, j) {
                edges.push((i, j));
            }
        }
    }
    RankingDag {
        m: ranking.m,
        edges,
        full: unranked.is_empty(),
    }
}

/// `(1/|E|) * sum (xi_j - xi_i)` over the DAG edges, summed in edge order.
/// Returns a zero vector and `false` when the DAG has no edges.
pub fn estimate_gradient(dag: &RankingDag, probes: &[Vec<f64>]) -> Result<(Vec<f64>, bool)> {
    if probes.len() != dag.m {
        return Err(Error::Contract(format!("{} probes for {} candidates", probes.len(), dag.m)));
    }
    let d = probes.first().map_or(0, Vec::len);
    let mut g = vec![0.0; d];
    if dag.edges.is_empty() {
        return Ok((g, false));
    }
    for &(i, j) in &dag.edges {
        for ((gd, &a), &b) in g.iter_mut().zip(&probes[j]).zip(&probes[i]) {
            *gd += a - b;
        }
    }
    let n = dag.edges.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((g, true))
}

/// What an oracle returns for one query. Only `ranking` reaches the
/// optimizer; `values` are diagnostics for the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub ranking: Ranking,
    pub values: Option<Vec<f64>>,
}

/// An `(m, k)` ranking oracle over flat candidate vectors.
pub trait RankingOracle {
    /// Ranks the candidates of iteration `t`.
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> Result<OracleAnswer>;

    fn name(&self) -> String;
}

/// Oracle from a closure computing one value per candidate (lower is better).
pub struct ValueOracle<F> {
    pub f: F,
    pub name: String,
}

impl<F> ValueOracle<F>
where
    F: FnMut(usize, &[Vec<f64>]) -> Result<Vec<f64>>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { f, name: name.into() }
    }
}

impl<F> RankingOracle for ValueOracle<F>
where
    F: FnMut(usize, &[Vec<f64>]) -> Result<Vec<f64>>,
{
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> Result<OracleAnswer> {
        let values = (self.f)(t, candidates)?;
        if values.len() != candidates.len() {
            return Err(Error::Oracle(format!(
                "{} values for {} candidates",
                values.len(),
                candidates.len()
            )));
        }
        Ok(OracleAnswer {
            ranking: Ranking::from_values(&values, k)?,
            values: Some(values),
        })
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Oracle from a closure returning an order of candidate indices.
pub struct OrderOracle<F> {
    pub f: F,
    pub name: String,
}

impl<F> OrderOracle<F>
where
    F: FnMut(usize, &[Vec<f64>], usize) -> Result<Vec<usize>>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { f, name: name.into() }
    }
}

impl<F> RankingOracle for OrderOracle<F>
where
    F: FnMut(usize, &[Vec<f64>], usize) -> Result<Vec<usize>>,
{
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> Result<OracleAnswer> {
        let order = (self.f)(t, candidates, k)?;
        Ok(OracleAnswer {
            ranking: Ranking::from_order(order, candidates.len(), k)?,
            values: None,
        })
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub oracle: String,
    pub config: TunerConfig,
    pub d_x: usize,
    /// Parameter count of the frozen model, when tuning a prompt.
    #[serde(default)]
    pub model_params: Option<usize>,
    /// `d_x / model_params`.
    #[serde(default)]
    pub param_ratio: Option<f64>,
    #[serde(default)]
    pub layout: Option<PromptLayout>,
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub t: usize,
    /// Iterate after this iteration's update.
    pub x: Vec<f64>,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    pub ranking: Vec<usize>,
    #[serde(default)]
    pub ties: Vec<(usize, usize)>,
    pub n_edges: usize,
    pub grad_norm: f64,
    /// The DAG had no edges, so `x` did not move.
    pub no_op: bool,
    #[serde(default)]
    pub eval_return: Option<f64>,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub oracle_calls: usize,
    #[serde(default)]
    pub aborted: Option<String>,
    pub x_final: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Header(TraceHeader),
    Iteration(IterationRecord),
    Summary(TraceSummary),
}

/// Complete record of one tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub header: TraceHeader,
    pub iterations: Vec<IterationRecord>,
    pub summary: Option<TraceSummary>,
}

impl TuneTrace {
    pub fn oracle_calls(&self) -> usize {
        self.iterations.last().map_or(0, |r| r.oracle_calls)
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![TraceLine::Header(self.header.clone())];
        lines.extend(self.iterations.iter().cloned().map(TraceLine::Iteration));
        lines.extend(self.summary.clone().map(TraceLine::Summary));
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("trace serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<TraceLine> = parse_jsonl(path, &text)?;
        let mut iter = lines.into_iter();
        let header = match iter.next() {
            Some(TraceLine::Header(h)) => h,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "trace must start with a header line".into(),
                })
            }
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut trace = TuneTrace {
            header,
            iterations: Vec::new(),
            summary: None,
        };
        for line in iter {
            match line {
                TraceLine::Iteration(r) => trace.iterations.push(r),
                TraceLine::Summary(s) => trace.summary = Some(s),
                TraceLine::Header(_) => {
                    return Err(Error::Data(format!("{}: repeated trace header", path.display())))
                }
            }
        }
        Ok(trace)
    }
}

/// Result of [`zo_rank_sgd`]. On oracle failure `aborted` holds the error
/// and `x` the last completed iterate.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub x: Vec<f64>,
    pub trace: TuneTrace,
    pub aborted: Option<String>,
}

/// Per-iteration generator; independent of how many iterations ran before,
/// so a run can resume at any `t`.
pub fn iteration_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x2A, t as u64]))
}

/// Hook evaluating an iterate after each update (e.g. a rollout return).
pub type Monitor<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;

/// Ranking-based zeroth-order descent from `x0`.
pub fn zo_rank_sgd(
    oracle: &mut dyn RankingOracle,
    x0: &[f64],
    cfg: &TunerConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<TuneOutcome> {
    let header = TraceHeader {
        format_version: FORMAT_VERSION,
        oracle: oracle.name(),
        config: cfg.clone(),
        d_x: x0.len(),
        model_params: None,
        param_ratio: None,
        layout: None,
        x0: x0.to_vec(),
        config_hash: None,
    };
    resume_zo_rank_sgd(oracle, TuneTrace { header, iterations: Vec::new(), summary: None }, cfg, monitor.as_deref_mut())
}

/// Continues a run whose completed iterations are already in `trace`.
pub fn resume_zo_rank_sgd(
    oracle: &mut dyn RankingOracle,
    mut trace: TuneTrace,
    cfg: &TunerConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<TuneOutcome> {
    let d_x = trace.header.d_x;
    if cfg.t > 0 {
        cfg.validate(d_x)?;
    }
    let mut x = trace
        .iterations
        .last()
        .map_or_else(|| trace.header.x0.clone(), |r| r.x.clone());
    let mut calls = trace.oracle_calls();
    let mut aborted = None;
    for t in trace.iterations.len() + 1..=cfg.t {
        let mut rng = iteration_rng(cfg.seed, t);
        let (candidates, probes) = perturb_candidates(&x, cfg.m, cfg.mu, cfg.scale.as_deref(), &mut rng);
        let answer = match oracle.rank(t, &candidates, cfg.k) {
            Ok(a) => a,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };
        calls += cfg.m;
        let ranking = answer.ranking;
        if ranking.m != cfg.m || ranking.order.len() != cfg.k {
            aborted = Some(format!(
                "oracle ranked {} of {} candidates, expected {} of {}",
                ranking.order.len(),
                ranking.m,
                cfg.k,
                cfg.m
            ));
            break;
        }
        let dag = build_dag(&ranking);
        let (g, moved) = estimate_gradient(&dag, &probes)?;
        for (d, (xd, gd)) in x.iter_mut().zip(&g).enumerate() {
            *xd -= cfg.eta * cfg.scale.as_ref().map_or(1.0, |s| s[d]) * gd;
        }
        let eval_return = match monitor.as_deref_mut() {
            Some(m) => match m(&x) {
                Ok(v) => Some(v),
                Err(e) => {
                    aborted = Some(e.to_string());
                    None
                }
            },
            None => None,
        };
        trace.iterations.push(IterationRecord {
            t,
            x: x.clone(),
            values: answer.values,
            ranking: ranking.order,
            ties: ranking.ties,
            n_edges: dag.edges.len(),
            grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            no_op: !moved,
            eval_return,
            oracle_calls: calls,
        });
        if aborted.is_some() {
            break;
        }
    }
    trace.summary = Some(TraceSummary {
        iterations: trace.iterations.len(),
        oracle_calls: calls,
        aborted: aborted.clone(),
        x_final: x.clone(),
    });
    Ok(TuneOutcome { x, trace, aborted })
}

/// Offline oracle: mean squared action error of the frozen model over fixed
/// windows of the target task's data, with the candidate as prompt.
pub struct OfflineLossOracle<'a> {
    pub ckpt: &'a Checkpoint,
    pub data: &'a EpisodeSet,
    pub windows: Vec<Window>,
    pub template: FlatPrompt,
    /// Evaluation batches per value and their size.
    pub batches: usize,
    pub batch_size: usize,
    /// Draw a fresh subset of windows every iteration instead of a fixed one.
    pub resample: bool,
    pub seed: u64,
}

impl<'a> OfflineLossOracle<'a> {
    pub fn new(ckpt: &'a Checkpoint, data: &'a EpisodeSet, windows: Vec<Window>, template: FlatPrompt) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Data("offline oracle needs at least one window".into()));
        }
        Ok(Self {
            ckpt,
            data,
            windows,
            template,
            batches: 8,
            batch_size: 32,
            resample: false,
            seed: 0,
        })
    }

    fn windows_for(&self, t: usize) -> Vec<Window> {
        let cap = self.batches * self.batch_size;
        let mut ws = self.windows.clone();
        if self.resample {
            use rand::seq::SliceRandom;
            ws.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x0FF, t as u64])));
        }
        ws.truncate(cap);
        ws
    }

    /// Loss of one prompt over `windows`.
    pub fn loss_of(&self, prompt: &PromptSegment, windows: &[Window]) -> Result<f64> {
        let mut total = 0.0;
        let mut weight = 0.0;
        for chunk in windows.chunks(self.batch_size) {
            let batch = window_batch(self.data, chunk, &[prompt], self.ckpt.config.k, false)?;
            let w: f64 = batch.loss_weight.iter().map(|&v| v as f64).sum();
            total += self.ckpt.loss(&batch)? * w;
            weight += w;
        }
        Ok(total / weight)
    }

    pub fn values(&self, t: usize, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        let windows = self.windows_for(t);
        candidates
            .par_iter()
            .map(|x| {
                let prompt = unflatten_prompt(&FlatPrompt {
                    x: x.clone(),
                    ..self.template.clone()
                })?;
                self.loss_of(&prompt, &windows)
            })
            .collect()
    }
}

impl RankingOracle for OfflineLossOracle<'_> {
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> Result<OracleAnswer> {
        let values = self.values(t, candidates)?;
        Ok(OracleAnswer {
            ranking: Ranking::from_values(&values, k)?,
            values: Some(values),
        })
    }

    fn name(&self) -> String {
        "offline".into()
    }
}

/// Online oracle: negated mean return of seeded rollouts with the candidate
/// as prompt.
pub struct OnlineReturnOracle<'a> {
    pub ckpt: &'a Checkpoint,
    pub task: &'a TaskSpec,
    pub template: FlatPrompt,
    pub episodes: usize,
    pub target_rtg: f32,
    pub seed: u64,
    /// Give every candidate of a query the same episode seeds.
    pub common_seeds: bool,
}

impl OnlineReturnOracle<'_> {
    /// Episode seeds for candidate `i` of iteration `t`.
    pub fn seeds(&self, t: usize, i: usize) -> Vec<u64> {
        let base = if self.common_seeds {
            derive_seed(self.seed, &[0x0A, t as u64])
        } else {
            derive_seed(self.seed, &[0x0B, t as u64, i as u64])
        };
        (0..self.episodes).map(|e| episode_seed(base, e)).collect()
    }

    /// Rollouts of every candidate, grouped per candidate.
    pub fn rollouts(&self, t: usize, candidates: &[Vec<f64>]) -> Result<Vec<Vec<Rollout>>> {
        rollout_candidates(self.ckpt, self.task, &self.template, candidates, self.target_rtg, |i| self.seeds(t, i))
    }

    pub fn values(&self, t: usize, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .rollouts(t, candidates)?
            .iter()
            .map(|rs| -rs.iter().map(|r| r.total_return).sum::<f64>() / rs.len().max(1) as f64)
            .collect())
    }
}

impl RankingOracle for OnlineReturnOracle<'_> {
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> Result<OracleAnswer> {
        let values = self.values(t, candidates)?;
        Ok(OracleAnswer {
            ranking: Ranking::from_values(&values, k)?,
            values: Some(values),
        })
    }

    fn name(&self) -> String {
        "online".into()
    }
}

/// Rolls out every candidate prompt on the episode seeds `seeds(i)`.
pub fn rollout_candidates(
    ckpt: &Checkpoint,
    task: &TaskSpec,
    template: &FlatPrompt,
    candidates: &[Vec<f64>],
    target_rtg: f32,
    seeds: impl Fn(usize) -> Vec<u64>,
) -> Result<Vec<Vec<Rollout>>> {
    let prompts = candidates
        .iter()
        .map(|x| {
            unflatten_prompt(&FlatPrompt {
                x: x.clone(),
                ..template.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<Vec<u64>> = (0..candidates.len()).map(seeds).collect();
    let jobs: Vec<RolloutJob> = prompts
        .iter()
        .zip(&seeds)
        .flat_map(|(prompt, ss)| {
            ss.iter().map(move |&seed| RolloutJob {
                task,
                prompt,
                target_rtg,
                seed,
            })
        })
        .collect();
    let mut flat = rollout_batch(ckpt, &jobs)?.into_iter();
    Ok(seeds
        .iter()
        .map(|ss| flat.by_ref().take(ss.len()).collect())
        .collect())
}

/// Outcome of tuning a prompt.
#[derive(Debug, Clone)]
pub struct TunedPrompt {
    pub prompt: PromptSegment,
    pub trace: TuneTrace,
    pub aborted: Option<String>,
}

/// Tunes `initial` against `oracle` with the model frozen.
pub fn tune_prompt(
    ckpt: &Checkpoint,
    initial: &PromptSegment,
    oracle: &mut dyn RankingOracle,
    cfg: &TunerConfig,
    monitor: Option<&mut Monitor<'_>>,
) -> Result<TunedPrompt> {
    if initial.k_star() != ckpt.config.k_star || initial.d_s != ckpt.config.d_s || initial.d_a != ckpt.config.d_a {
        return Err(Error::Contract(format!(
            "prompt layout {:?} does not fit the checkpoint",
            initial.layout()
        )));
    }
    let flat = flatten_prompt(initial);
    let mut outcome = zo_rank_sgd(oracle, &flat.x, cfg, monitor)?;
    let params = ckpt.param_count();
    outcome.trace.header.model_params = Some(params);
    outcome.trace.header.param_ratio = Some(flat.x.len() as f64 / params as f64);
    outcome.trace.header.layout = Some(flat.layout);
    let prompt = unflatten_prompt(&FlatPrompt { x: outcome.x, ..flat })?;
    Ok(TunedPrompt {
        prompt,
        trace: outcome.trace,
        aborted: outcome.aborted,
    })
}

/// Monitor that evaluates each iterate by rollouts.
pub fn rollout_monitor<'a>(
    ckpt: &'a Checkpoint,
    task: &'a TaskSpec,
    template: FlatPrompt,
    episodes: usize,
    target_rtg: f32,
    seed: u64,
) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    move |x: &[f64]| {
        let prompt = unflatten_prompt(&FlatPrompt {
            x: x.to_vec(),
            ..template.clone()
        })?;
        Ok(evaluate(ckpt, &prompt, task, episodes, target_rtg, seed)?.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mu_keeps_candidates_at_x() {
        let x = vec![1.0, -2.0, 0.5];
        let (cands, probes) = perturb_candidates(&x, 4, 0.0, None, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(cands.len(), 4);
        assert!(cands.iter().all(|c| c == &x));
        assert!(probes.iter().all(|p| p.len() == 3));
    }

    #[test]
    fn dag_examples() {
        let dag = build_dag(&Ranking::from_values(&[3.0, 1.0, 2.0], 3).unwrap());
        assert_eq!(dag.edges, vec![(1, 2), (1, 0), (2, 0)]);
        assert!(dag.full);

        let dag = build_dag(&Ranking::from_values(&[1.0, 2.0], 2).unwrap());
        assert_eq!(dag.edges, vec![(0, 1)]);

        let dag = build_dag(&Ranking::from_order(vec![3, 1], 4, 2).unwrap());
        let mut edges = dag.edges.clone();
        edges.sort();
        assert_eq!(edges, vec![(1, 0), (1, 2), (3, 0), (3, 1), (3, 2)]);
        assert!(!dag.full);

        let dag = build_dag(&Ranking::from_order(vec![2, 0, 1], 3, 3).unwrap());
        assert_eq!(dag.edges, vec![(2, 0), (2, 1), (0, 1)]);
    }

    #[test]
    fn estimator_examples() {
        let probes = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![4.0, 4.0]];
        let dag = build_dag(&Ranking::from_values(&[3.0, 1.0, 2.0], 3).unwrap());
        let (g, moved) = estimate_gradient(&dag, &probes).unwrap();
        assert!(moved);
        // (2 xi_0 - 2 xi_1) / 3
        assert_eq!(g, vec![2.0 / 3.0, -4.0 / 3.0]);

        let dag = build_dag(&Ranking::from_values(&[1.0, 2.0], 2).unwrap());
        let (g, _) = estimate_gradient(&dag, &probes[..2]).unwrap();
        assert_eq!(g, vec![-1.0, 2.0]);
    }

    #[test]
    fn all_tied_is_a_no_op() {
        let ranking = Ranking::from_values(&[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(ranking.order, vec![0, 1, 2]);
        assert_eq!(ranking.ties.len(), 3);
        let dag = build_dag(&ranking);
        assert!(dag.edges.is_empty());
        let (g, moved) = estimate_gradient(&dag, &[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!((g, moved), (vec![0.0], false));
    }

    #[test]
    fn bad_orders_are_rejected() {
        assert!(Ranking::from_order(vec![0, 0, 1], 3, 3).is_err());
        assert!(Ranking::from_order(vec![0, 3], 3, 2).is_err());
        assert!(Ranking::from_order(vec![0], 3, 2).is_err());
        assert!(Ranking::from_values(&[0.0, f64::NAN], 2).is_err());
    }

    #[test]
    fn zero_iterations_return_x0() {
        let mut oracle = ValueOracle::new("quad", |_, c: &[Vec<f64>]| Ok(c.iter().map(|x| x[0] * x[0]).collect()));
        let cfg = TunerConfig {
            t: 0,
            ..TunerConfig::default()
        };
        let out = zo_rank_sgd(&mut oracle, &[3.0, 4.0], &cfg, None).unwrap();
        assert_eq!(out.x, vec![3.0, 4.0]);
        assert!(out.trace.iterations.is_empty());
    }

    #[test]
    fn oracle_failure_keeps_partial_trace() {
        let mut oracle = ValueOracle::new("flaky", |t, c: &[Vec<f64>]| {
            if t == 3 {
                Err(Error::Oracle("gone".into()))
            } else {
                Ok(c.iter().map(|x| x[0]).collect())
            }
        });
        let cfg = TunerConfig {
            t: 5,
            m: 4,
            k: 4,
            ..TunerConfig::default()
        };
        let out = zo_rank_sgd(&mut oracle, &[0.0], &cfg, None).unwrap();
        assert_eq!(out.trace.iterations.len(), 2);
        assert!(out.aborted.unwrap().contains("gone"));
        assert_eq!(out.trace.summary.unwrap().oracle_calls, 8);
    }
}
