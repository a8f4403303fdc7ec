//! Point-mass control environments with three task families and scripted
//! behavior policies of graded quality.
//!
//! * `point-dir-2d`: accelerate along a goal direction; reward is the
//!   velocity component along it.
//! * `point-vel-1d`: track a target speed in `[0, 3]`; reward is minus the
//!   absolute tracking error.
//! * `point-reach-2d`: move to a goal position; reward is minus the
//!   Euclidean distance to it.
//!
//! Environments are plain values: `reset` builds a state, `step` maps a
//! state and an action to a [`Transition`] without touching anything else.

use std::f32::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seeds::derive_seed;
use crate::trajdata::{Episode, EpisodeSet};
use crate::{Error, Result};

pub const DT: f32 = 0.1;
pub const DIR_V_MAX: f32 = 2.0;
pub const VEL_V_MAX: f32 = 3.5;
pub const VEL_TARGET_MAX: f32 = 3.0;
pub const REACH_BOUND: f32 = 2.0;
pub const REACH_GOAL_RADIUS: f32 = 1.5;
/// Gain of the proportional expert controllers.
pub const EXPERT_GAIN: f32 = 5.0;
/// Standard deviation of the Gaussian noise added by the medium policy.
pub const MEDIUM_NOISE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "point-dir-2d")]
    PointDir2d,
    #[serde(rename = "point-vel-1d")]
    PointVel1d,
    #[serde(rename = "point-reach-2d")]
    PointReach2d,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::PointDir2d, Family::PointVel1d, Family::PointReach2d];

    pub fn name(self) -> &'static str {
        match self {
            Family::PointDir2d => "point-dir-2d",
            Family::PointVel1d => "point-vel-1d",
            Family::PointReach2d => "point-reach-2d",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Family::PointDir2d => 4,
            Family::PointVel1d => 2,
            Family::PointReach2d => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::PointDir2d => 2,
            Family::PointVel1d => 1,
            Family::PointReach2d => 2,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Family::PointDir2d | Family::PointVel1d => 100,
            Family::PointReach2d => 50,
        }
    }

    /// Largest possible per-step reward magnitude.
    pub fn reward_bound(self) -> f32 {
        match self {
            Family::PointDir2d => DIR_V_MAX,
            Family::PointVel1d => VEL_V_MAX,
            Family::PointReach2d => 2.0 * REACH_BOUND * std::f32::consts::SQRT_2,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown task family {s:?}")))
    }
}

/// One task of a family: a goal direction, target speed or goal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    /// `[theta]` for dir, `[v_target]` for vel, `[gx, gy]` for reach.
    pub task_param: Vec<f32>,
    pub task_index: usize,
    pub horizon: usize,
}

impl TaskSpec {
    pub fn dir(task_index: usize, theta: f32) -> Self {
        Self::new(Family::PointDir2d, vec![theta], task_index)
    }

    pub fn vel(task_index: usize, target: f32) -> Self {
        Self::new(Family::PointVel1d, vec![target], task_index)
    }

    pub fn reach(task_index: usize, goal: [f32; 2]) -> Self {
        Self::new(Family::PointReach2d, goal.to_vec(), task_index)
    }

    fn new(family: Family, task_param: Vec<f32>, task_index: usize) -> Self {
        Self {
            family,
            task_param,
            task_index,
            horizon: family.horizon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.family {
            Family::PointDir2d | Family::PointVel1d => 1,
            Family::PointReach2d => 2,
        };
        if self.task_param.len() != expected || self.horizon == 0 {
            return Err(Error::Contract(format!("malformed task {self:?}")));
        }
        if self.family == Family::PointVel1d && !(0.0..=VEL_TARGET_MAX).contains(&self.task_param[0]) {
            return Err(Error::Contract(format!(
                "target velocity {} outside [0, {VEL_TARGET_MAX}]",
                self.task_param[0]
            )));
        }
        Ok(())
    }

    /// Unit goal direction of a dir task.
    pub fn direction(&self) -> [f32; 2] {
        let theta = self.task_param[0];
        [theta.cos(), theta.sin()]
    }

    pub fn describe(&self) -> String {
        match self.family {
            Family::PointDir2d => format!("run along angle {:.3} rad", self.task_param[0]),
            Family::PointVel1d => format!("hold speed {:.3}", self.task_param[0]),
            Family::PointReach2d => format!(
                "reach ({:.3}, {:.3})",
                self.task_param[0], self.task_param[1]
            ),
        }
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let obs = match self.family {
            Family::PointDir2d => vec![0.0; 4],
            Family::PointVel1d => vec![0.0; 2],
            Family::PointReach2d => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
            }
        };
        EnvState { obs, t: 0 }
    }

    pub fn step(&self, state: &EnvState, action: &[f32]) -> Result<Transition> {
        if state.t >= self.horizon {
            return Err(Error::EpisodeDone {
                t: state.t,
                horizon: self.horizon,
            });
        }
        let d_a = self.family.action_dim();
        if action.len() != d_a {
            return Err(Error::Contract(format!(
                "{} expects {d_a}-dimensional actions, got {}",
                self.family,
                action.len()
            )));
        }
        let a: Vec<f32> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let s = &state.obs;
        let (obs, reward) = match self.family {
            Family::PointDir2d => {
                let mut v = [s[2] + DT * a[0], s[3] + DT * a[1]];
                let speed = v[0].hypot(v[1]);
                if speed > DIR_V_MAX {
                    v = [v[0] * DIR_V_MAX / speed, v[1] * DIR_V_MAX / speed];
                }
                let p = [s[0] + DT * v[0], s[1] + DT * v[1]];
                let u = self.direction();
                // The cap holds up to rounding; clamp so the reward bound is exact.
                let along = (v[0] * u[0] + v[1] * u[1]).clamp(-DIR_V_MAX, DIR_V_MAX);
                (vec![p[0], p[1], v[0], v[1]], along)
            }
            Family::PointVel1d => {
                let v = (s[0] + DT * a[0]).clamp(0.0, VEL_V_MAX);
                (vec![v, a[0]], -(v - self.task_param[0]).abs())
            }
            Family::PointReach2d => {
                let p = [
                    (s[0] + DT * a[0]).clamp(-REACH_BOUND, REACH_BOUND),
                    (s[1] + DT * a[1]).clamp(-REACH_BOUND, REACH_BOUND),
                ];
                let dist = (p[0] - self.task_param[0]).hypot(p[1] - self.task_param[1]);
                (p.to_vec(), -dist)
            }
        };
        Ok(Transition {
            state: state.clone(),
            action: a,
            reward,
            next_state: EnvState { obs, t: state.t + 1 },
            t: state.t,
        })
    }
}

/// Observation plus elapsed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub obs: Vec<f32>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    /// The action as applied, after clipping to `[-1, 1]`.
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: EnvState,
    pub t: usize,
}

/// Evenly spaced tasks of a family, indexed `0..n`.
pub fn enumerate_tasks(family: Family, n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| match family {
            Family::PointDir2d => TaskSpec::dir(i, 2.0 * PI * i as f32 / n as f32),
            Family::PointVel1d => {
                let frac = if n > 1 { i as f32 / (n - 1) as f32 } else { 0.5 };
                TaskSpec::vel(i, VEL_TARGET_MAX * frac)
            }
            Family::PointReach2d => {
                let angle = 2.0 * PI * i as f32 / n as f32;
                TaskSpec::reach(i, [REACH_GOAL_RADIUS * angle.cos(), REACH_GOAL_RADIUS * angle.sin()])
            }
        })
        .collect()
}

/// Indices of the held-out tasks among `n_total` enumerated tasks: the
/// midpoints of `n_test` equal blocks, so test tasks sit inside the
/// parameter range rather than at its ends.
pub fn test_indices(n_total: usize, n_test: usize) -> Vec<usize> {
    (0..n_test)
        .map(|j| ((2 * j + 1) * n_total) / (2 * n_test))
        .collect()
}

/// Enumerates `n_train + n_test` tasks and splits them into disjoint,
/// interleaved train and test sets.
pub fn split_tasks(family: Family, n_train: usize, n_test: usize) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    let total = n_train + n_test;
    if total == 0 {
        return Err(Error::Contract("split of zero tasks".into()));
    }
    let tasks = enumerate_tasks(family, total);
    let test_idx = test_indices(total, n_test);
    let (test, train): (Vec<_>, Vec<_>) = tasks
        .into_iter()
        .partition(|t| test_idx.contains(&t.task_index));
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Expert, Quality::Medium, Quality::Random];

    pub fn name(self) -> &'static str {
        match self {
            Quality::Random => "random",
            Quality::Medium => "medium",
            Quality::Expert => "expert",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Quality::Random, Quality::Medium, Quality::Expert]
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown quality {s:?}")))
    }
}

/// Hand-written controller of a given quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedPolicy {
    pub quality: Quality,
    /// Multiplier on the expert action used by the medium policy.
    pub medium_scale: f32,
}

impl ScriptedPolicy {
    pub fn expert() -> Self {
        Self {
            quality: Quality::Expert,
            medium_scale: 1.0,
        }
    }

    pub fn random() -> Self {
        Self {
            quality: Quality::Random,
            medium_scale: 0.0,
        }
    }

    pub fn medium(scale: f32) -> Self {
        Self {
            quality: Quality::Medium,
            medium_scale: scale,
        }
    }

    pub fn act(&self, task: &TaskSpec, state: &EnvState, rng: &mut impl Rng) -> Vec<f32> {
        match self.quality {
            Quality::Expert => expert_action(task, state),
            Quality::Random => (0..task.family.action_dim())
                .map(|_| rng.gen_range(-1.0..=1.0))
                .collect(),
            Quality::Medium => expert_action(task, state)
                .into_iter()
                .map(|a| {
                    let noise: f32 = rng.sample(StandardNormal);
                    (self.medium_scale * a + MEDIUM_NOISE * noise).clamp(-1.0, 1.0)
                })
                .collect(),
        }
    }
}

fn expert_action(task: &TaskSpec, state: &EnvState) -> Vec<f32> {
    let s = &state.obs;
    let p = &task.task_param;
    match task.family {
        Family::PointDir2d => task.direction().to_vec(),
        Family::PointVel1d => vec![(EXPERT_GAIN * (p[0] - s[0])).clamp(-1.0, 1.0)],
        Family::PointReach2d => vec![
            (EXPERT_GAIN * (p[0] - s[0])).clamp(-1.0, 1.0),
            (EXPERT_GAIN * (p[1] - s[1])).clamp(-1.0, 1.0),
        ],
    }
}

/// Seed of the action-noise stream of a scripted episode with reset seed
/// `seed`.
pub fn scripted_noise_seed(seed: u64) -> u64 {
    derive_seed(seed, &[1])
}

/// Rolls out one full episode of a scripted policy.
pub fn run_scripted_episode(task: &TaskSpec, policy: &ScriptedPolicy, seed: u64) -> Result<Episode> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scripted_noise_seed(seed));
    let mut state = task.reset(seed);
    let mut states = Vec::with_capacity(task.horizon);
    let mut actions = Vec::with_capacity(task.horizon);
    let mut rewards = Vec::with_capacity(task.horizon);
    for _ in 0..task.horizon {
        let action = policy.act(task, &state, &mut rng);
        let tr = task.step(&state, &action)?;
        states.push(state.obs.clone());
        actions.push(tr.action);
        rewards.push(tr.reward);
        state = tr.next_state;
    }
    Episode::new(task, policy.quality, seed, states, actions, rewards)
}

/// Episodic returns of `n` seeded scripted episodes.
pub fn scripted_returns(task: &TaskSpec, policy: &ScriptedPolicy, n: usize, seed: u64) -> Result<Vec<f64>> {
    (0..n)
        .map(|i| {
            run_scripted_episode(task, policy, derive_seed(seed, &[task.task_index as u64, i as u64]))
                .map(|ep| ep.total_return())
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Stored constant of the medium behavior policy for one family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumCalibration {
    pub family: Family,
    pub scale: f32,
    /// Mean normalized return (expert = 1, random = 0) at `scale`.
    pub normalized: f64,
}

/// Normalized level the medium policy is calibrated to.
pub const MEDIUM_TARGET: f64 = 1.0 / 3.0;

/// Bisects the medium action scale so that its mean normalized return over
/// `tasks` is one third of the way from random to expert.
pub fn calibrate_medium(tasks: &[TaskSpec], episodes: usize, seed: u64) -> Result<MediumCalibration> {
    let family = tasks
        .first()
        .ok_or_else(|| Error::Contract("calibration needs at least one task".into()))?
        .family;
    let per_task = episodes.div_ceil(tasks.len()).max(1);
    let mut anchors = Vec::with_capacity(tasks.len());
    for task in tasks {
        let expert = mean(&scripted_returns(task, &ScriptedPolicy::expert(), per_task, seed)?);
        let random = mean(&scripted_returns(task, &ScriptedPolicy::random(), per_task, seed)?);
        anchors.push((expert, random));
    }
    let normalized_at = |scale: f32| -> Result<f64> {
        let mut total = 0.0;
        for (task, &(expert, random)) in tasks.iter().zip(&anchors) {
            let ret = mean(&scripted_returns(task, &ScriptedPolicy::medium(scale), per_task, seed)?);
            let gap = expert - random;
            total += if gap.abs() > 1e-9 { (ret - random) / gap } else { 1.0 };
        }
        Ok(total / tasks.len() as f64)
    };
    let (mut lo, mut hi) = (0.0f32, 1.0f32);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if normalized_at(mid)? < MEDIUM_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);
    Ok(MediumCalibration {
        family,
        scale,
        normalized: normalized_at(scale)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMix {
    /// Random, then medium, then expert episodes, in thirds.
    Gradient,
    Only(Quality),
}

/// Quality tag of episode `i` out of `n` under the mix.
pub fn quality_at(mix: QualityMix, i: usize, n: usize) -> Quality {
    match mix {
        QualityMix::Only(q) => q,
        QualityMix::Gradient => {
            let third = n / 3;
            if i < third {
                Quality::Random
            } else if i >= n - third {
                Quality::Expert
            } else {
                Quality::Medium
            }
        }
    }
}

/// Offline data for one task, ordered from worst to best behavior policy
/// under [`QualityMix::Gradient`].
pub fn generate_dataset(
    task: &TaskSpec,
    mix: QualityMix,
    n_episodes: usize,
    seed: u64,
    medium_scale: f32,
) -> Result<EpisodeSet> {
    if n_episodes == 0 {
        return Err(Error::Contract("n_episodes must be at least 1".into()));
    }
    let episodes = (0..n_episodes)
        .map(|i| {
            let policy = match quality_at(mix, i, n_episodes) {
                Quality::Expert => ScriptedPolicy::expert(),
                Quality::Medium => ScriptedPolicy::medium(medium_scale),
                Quality::Random => ScriptedPolicy::random(),
            };
            run_scripted_episode(task, &policy, derive_seed(seed, &[task.task_index as u64, i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeSet::new(episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resets() {
        assert_eq!(TaskSpec::dir(0, 0.3).reset(17).obs, vec![0.0; 4]);
        assert_eq!(TaskSpec::vel(0, 1.0).reset(17).obs, vec![0.0; 2]);
        let reach = TaskSpec::reach(0, [1.0, 0.0]);
        let a = reach.reset(5);
        assert_eq!(a, reach.reset(5));
        assert_ne!(a, reach.reset(6));
        assert!(a.obs.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_error_rewards() {
        let vel = TaskSpec::vel(0, 1.0);
        let tr = vel.step(&EnvState { obs: vec![1.0, 0.0], t: 0 }, &[0.0]).unwrap();
        assert_eq!(tr.reward, 0.0);

        let reach = TaskSpec::reach(0, [0.5, -0.5]);
        let tr = reach.step(&EnvState { obs: vec![0.5, -0.5], t: 3 }, &[0.0, 0.0]).unwrap();
        assert_eq!(tr.reward, 0.0);

        let dir = TaskSpec::dir(0, 0.0);
        let tr = dir.step(&EnvState { obs: vec![0.0, 0.0, 1.0, 0.0], t: 0 }, &[0.0, 0.0]).unwrap();
        assert_eq!(tr.reward, 1.0);
    }

    #[test]
    fn step_past_horizon_signals_done() {
        let task = TaskSpec::vel(0, 1.0);
        let state = EnvState { obs: vec![0.0, 0.0], t: task.horizon };
        assert!(matches!(task.step(&state, &[0.0]), Err(Error::EpisodeDone { .. })));
    }

    #[test]
    fn actions_are_clipped() {
        let task = TaskSpec::vel(0, 1.0);
        let tr = task.step(&task.reset(0), &[7.0]).unwrap();
        assert_eq!(tr.action, vec![1.0]);
        assert!((tr.next_state.obs[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn dir_speed_is_capped() {
        let task = TaskSpec::dir(0, 0.0);
        let mut s = EnvState { obs: vec![0.0, 0.0, 2.0, 0.0], t: 0 };
        for _ in 0..5 {
            s = task.step(&s, &[1.0, 1.0]).unwrap().next_state;
        }
        assert!(s.obs[2].hypot(s.obs[3]) <= DIR_V_MAX + 1e-6);
    }

    #[test]
    fn expert_vel_clips_proportional_control() {
        let task = TaskSpec::vel(0, 1.0);
        let a = ScriptedPolicy::expert().act(&task, &task.reset(0), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn random_policy_is_centered() {
        let task = TaskSpec::reach(0, [0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = task.reset(0);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        for _ in 0..n {
            let a = ScriptedPolicy::random().act(&task, &state, &mut rng);
            sum[0] += a[0] as f64;
            sum[1] += a[1] as f64;
        }
        assert!(sum.iter().all(|s| (s / n as f64).abs() < 0.02), "{sum:?}");
    }

    #[test]
    fn vel_split_interleaves() {
        let (train, test) = split_tasks(Family::PointVel1d, 8, 2).unwrap();
        let test_idx: Vec<usize> = test.iter().map(|t| t.task_index).collect();
        assert_eq!(test_idx, vec![2, 7]);
        assert_eq!(train.len(), 8);
        assert!(train.iter().all(|t| !test_idx.contains(&t.task_index)));
        let all = enumerate_tasks(Family::PointVel1d, 10);
        assert_eq!(all[0].task_param[0], 0.0);
        assert_eq!(all[9].task_param[0], 3.0);
        assert!((all[2].task_param[0] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dir_pair_is_forward_backward() {
        let (train, test) = split_tasks(Family::PointDir2d, 2, 0).unwrap();
        assert!(test.is_empty());
        assert_eq!(train[0].task_param[0], 0.0);
        assert!((train[1].task_param[0] - PI).abs() < 1e-6);
    }

    #[test]
    fn gradient_mix_orders_quality() {
        let task = TaskSpec::vel(0, 1.0);
        let set = generate_dataset(&task, QualityMix::Gradient, 30, 9, 0.3).unwrap();
        let tags: Vec<Quality> = set.episodes.iter().map(|e| e.quality).collect();
        assert!(tags[..10].iter().all(|&q| q == Quality::Random));
        assert!(tags[10..20].iter().all(|&q| q == Quality::Medium));
        assert!(tags[20..].iter().all(|&q| q == Quality::Expert));
    }

    #[test]
    fn scripted_episodes_are_reproducible() {
        let task = TaskSpec::reach(1, [1.0, 1.0]);
        let a = run_scripted_episode(&task, &ScriptedPolicy::medium(0.4), 77).unwrap();
        let b = run_scripted_episode(&task, &ScriptedPolicy::medium(0.4), 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rewards_stay_within_bounds() {
        for family in Family::ALL {
            for task in enumerate_tasks(family, 5) {
                for policy in [ScriptedPolicy::random(), ScriptedPolicy::expert()] {
                    let ep = run_scripted_episode(&task, &policy, 4).unwrap();
                    let bound = family.reward_bound();
                    assert!(ep.rewards.iter().all(|r| r.abs() <= bound), "{family}");
                }
            }
        }
    }
}
