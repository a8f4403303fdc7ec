//! The tuning loop and its single-slot rendezvous with the HTTP layer.

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use ptdt_core::dtmodel::Checkpoint;
use ptdt_core::trajdata::{flatten_prompt, unflatten_prompt, FlatPrompt};
use ptdt_core::zorank::{
    resume_zo_rank_sgd, rollout_monitor, OnlineReturnOracle, OracleAnswer, Ranking, RankingOracle, TraceHeader,
    TuneTrace, TunerConfig,
};
use ptdt_core::FORMAT_VERSION;

use crate::session::{CandidateSet, SessionFile, SessionSpec, SubmittedRanking, TunerState};
use crate::{Error, Result};

/// Mutable session state shared by the worker and the handlers.
#[derive(Debug)]
pub struct Inner {
    pub file: SessionFile,
    /// Answer for the pending iteration, set by the first valid submission.
    pub answer: Option<SubmittedRanking>,
    pub trace: TuneTrace,
    /// Stop without marking the session aborted (service shutdown).
    pub stop: bool,
}

#[derive(Debug)]
pub struct Shared {
    pub inner: Mutex<Inner>,
    pub changed: Condvar,
    pub dir: PathBuf,
    pub reveal_returns: bool,
}

/// Why a submission was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refusal {
    /// Not awaiting a ranking, or the ranking is for another iteration.
    Conflict(String),
    Invalid(String),
}

impl Shared {
    pub fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Accepts `order` for the pending query; first writer wins.
    pub fn submit(&self, t: Option<usize>, order: Vec<usize>) -> std::result::Result<usize, Refusal> {
        let mut inner = self.lock();
        let pending = match (&inner.file.pending, inner.file.state) {
            (Some(p), TunerState::AwaitingRanking) if inner.answer.is_none() => p,
            _ => return Err(Refusal::Conflict(format!("not awaiting a ranking (state {:?})", inner.file.state))),
        };
        if let Some(t) = t.filter(|&t| t != pending.t) {
            return Err(Refusal::Conflict(format!("iteration {t} is not open (current {})", pending.t)));
        }
        Ranking::from_order(order.clone(), pending.m, pending.k).map_err(|e| Refusal::Invalid(e.to_string()))?;
        let t = pending.t;
        let submitted = SubmittedRanking { t, order };
        inner.file.history.push(submitted.clone());
        inner.file.pending = None;
        inner.file.state = TunerState::Idle;
        inner.answer = Some(submitted);
        if let Err(e) = inner.file.save(&self.dir) {
            log::warn!("could not persist session: {e}");
        }
        self.changed.notify_all();
        Ok(t)
    }

    /// Marks the session aborted; the worker stops at its next check.
    pub fn abort(&self) -> std::result::Result<(), Refusal> {
        let mut inner = self.lock();
        if inner.file.state.is_terminal() {
            return Err(Refusal::Conflict(format!("session already {:?}", inner.file.state)));
        }
        inner.file.state = TunerState::Aborted;
        inner.file.pending = None;
        inner.file.error = Some("aborted by user".into());
        if let Err(e) = inner.file.save(&self.dir) {
            log::warn!("could not persist session: {e}");
        }
        self.changed.notify_all();
        Ok(())
    }

    /// Wakes the worker and makes it return without touching the state.
    pub fn stop(&self) {
        self.lock().stop = true;
        self.changed.notify_all();
    }

    /// Blocks until the session reaches a terminal state or stops.
    pub fn wait_done(&self) -> TunerState {
        let mut inner = self.lock();
        while !inner.file.state.is_terminal() && !inner.stop {
            inner = self.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
        inner.file.state
    }
}

/// Ranking oracle answered over HTTP.
struct HumanOracle<'a> {
    shared: &'a Shared,
    rollouts: OnlineReturnOracle<'a>,
}

impl RankingOracle for HumanOracle<'_> {
    fn rank(&mut self, t: usize, candidates: &[Vec<f64>], k: usize) -> ptdt_core::Result<OracleAnswer> {
        let interrupted = |inner: &Inner| inner.stop || inner.file.state == TunerState::Aborted;
        if interrupted(&self.shared.lock()) {
            return Err(ptdt_core::Error::Oracle("session interrupted".into()));
        }
        let rollouts = self.rollouts.rollouts(t, candidates)?;
        let set = CandidateSet::build(t, k, self.rollouts.task, &rollouts, self.shared.reveal_returns);
        let mut inner = self.shared.lock();
        if interrupted(&inner) {
            return Err(ptdt_core::Error::Oracle("session interrupted".into()));
        }
        // A restored session already shows this iteration's (identical)
        // candidates and may already hold its answer.
        if inner.answer.as_ref().map_or(true, |a| a.t != t) {
            inner.answer = None;
            inner.file.t = t;
            inner.file.pending = Some(set);
            inner.file.state = TunerState::AwaitingRanking;
            inner.file.save(&self.shared.dir).map_err(|e| ptdt_core::Error::Oracle(e.to_string()))?;
            self.shared.changed.notify_all();
        }
        loop {
            if interrupted(&inner) {
                return Err(ptdt_core::Error::Oracle("session interrupted".into()));
            }
            if let Some(answer) = inner.answer.take().filter(|a| a.t == t) {
                return Ok(OracleAnswer {
                    ranking: Ranking::from_order(answer.order, candidates.len(), k)?,
                    values: None,
                });
            }
            inner = self.shared.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn name(&self) -> String {
        "external".into()
    }
}

pub fn new_trace(ckpt: &Checkpoint, flat: &FlatPrompt, cfg: &TunerConfig, id: &str) -> TuneTrace {
    let params = ckpt.param_count();
    TuneTrace {
        header: TraceHeader {
            format_version: FORMAT_VERSION,
            oracle: "external".into(),
            config: cfg.clone(),
            d_x: flat.x.len(),
            model_params: Some(params),
            param_ratio: Some(flat.x.len() as f64 / params as f64),
            layout: Some(flat.layout.clone()),
            x0: flat.x.clone(),
            config_hash: Some(id.to_string()),
        },
        iterations: Vec::new(),
        summary: None,
    }
}

/// Runs the remaining iterations, persisting the trace after each one.
pub fn run(shared: Arc<Shared>, ckpt: Checkpoint, spec: SessionSpec) {
    if let Err(e) = run_inner(&shared, &ckpt, &spec) {
        let mut inner = shared.lock();
        if !inner.stop {
            inner.file.state = TunerState::Aborted;
            inner.file.error = Some(e.to_string());
            inner.file.pending = None;
            let _ = inner.file.save(&shared.dir);
        }
        shared.changed.notify_all();
    }
}

fn run_inner(shared: &Shared, ckpt: &Checkpoint, spec: &SessionSpec) -> Result<()> {
    let flat = flatten_prompt(&spec.prompt);
    let rollouts = OnlineReturnOracle {
        ckpt,
        task: &spec.task,
        template: flat.clone(),
        episodes: spec.episodes,
        target_rtg: spec.target_rtg,
        seed: spec.rollout_seed,
        common_seeds: true,
    };
    let mut oracle = HumanOracle { shared, rollouts };
    let mut monitor = rollout_monitor(
        ckpt,
        &spec.task,
        flat.clone(),
        spec.episodes,
        spec.target_rtg,
        spec.rollout_seed,
    );
    loop {
        let (trace, state) = {
            let inner = shared.lock();
            (inner.trace.clone(), inner.file.state)
        };
        if state.is_terminal() {
            return Ok(());
        }
        let done = trace.iterations.len();
        if done >= spec.tuner.t {
            let mut inner = shared.lock();
            let x = trace.iterations.last().map_or(flat.x.clone(), |r| r.x.clone());
            let prompt = unflatten_prompt(&FlatPrompt { x, ..flat.clone() })?;
            ptdt_core::artifact::write_json(&shared.dir.join("prompt.json"), &prompt)?;
            inner.file.state = TunerState::Finished;
            inner.file.pending = None;
            inner.file.save(&shared.dir)?;
            shared.changed.notify_all();
            return Ok(());
        }
        let step = TunerConfig {
            t: done + 1,
            ..spec.tuner.clone()
        };
        let out = resume_zo_rank_sgd(&mut oracle, trace, &step, Some(&mut monitor))?;
        out.trace.save(&SessionFile::trace_path(&shared.dir))?;
        let mut inner = shared.lock();
        inner.trace = out.trace;
        if inner.stop {
            return Ok(());
        }
        if let Some(reason) = out.aborted {
            if inner.file.state != TunerState::Aborted {
                return Err(Error::Session(reason));
            }
            return Ok(());
        }
        shared.changed.notify_all();
    }
}
