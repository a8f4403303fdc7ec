use proptest::prelude::*;

use ptdt_core::envs::{enumerate_tasks, generate_dataset, Family, Quality, QualityMix, ScriptedPolicy};
use ptdt_core::eval::ablate::*;
use ptdt_core::eval::*;
use ptdt_core::pretrain::FinetuneConfig;
use ptdt_core::trajdata::PromptSegment;
use ptdt_core::zorank::TunerConfig;
use ptdt_core::Error;

mod common;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[test]
fn expert_rollouts_reproduce_dataset_returns() {
    for fam in Family::ALL {
        let task = &enumerate_tasks(fam, 10)[8];
        let data = generate_dataset(task, QualityMix::Gradient, 9, 21, 0.15).unwrap();
        for ep in &data.episodes {
            let prompt = PromptSegment::empty(fam.state_dim(), fam.action_dim());
            let job = RolloutJob {
                task,
                prompt: &prompt,
                target_rtg: 0.0,
                seed: ep.seed,
            };
            let policy = match ep.quality {
                Quality::Expert => ScriptedPolicy::expert(),
                Quality::Medium => ScriptedPolicy::medium(0.15),
                Quality::Random => ScriptedPolicy::random(),
            };
            let r = rollout_with(&mut ScriptedActor::new(policy), &[job], 20).unwrap();
            assert_eq!(r[0].total_return, ep.total_return(), "{fam} {:?}", ep.quality);
        }
    }
}

#[test]
fn deterministic_families_have_zero_spread_and_seeds_replay() {
    let dir = enumerate_tasks(Family::PointDir2d, 2);
    let model = common::pretrain(Family::PointDir2d, &dir, 16, 5, 2, 2);
    let td = &model.tasks[0];
    let prompt = initial_prompt(&model.ckpt, &td.task, &td.data, Quality::Expert, 0).unwrap();
    let a = evaluate(&model.ckpt, &prompt, &td.task, 6, 150.0, 4).unwrap();
    assert_eq!(a.std, 0.0);
    assert_eq!(a.returns.len(), 6);

    let reach = enumerate_tasks(Family::PointReach2d, 2);
    let model = common::pretrain(Family::PointReach2d, &reach, 16, 5, 2, 2);
    let td = &model.tasks[1];
    let prompt = initial_prompt(&model.ckpt, &td.task, &td.data, Quality::Expert, 0).unwrap();
    let a = evaluate(&model.ckpt, &prompt, &td.task, 6, 30.0, 4).unwrap();
    let b = evaluate(&model.ckpt, &prompt, &td.task, 6, 30.0, 4).unwrap();
    let c = evaluate(&model.ckpt, &prompt, &td.task, 6, 30.0, 5).unwrap();
    assert_eq!(a.returns, b.returns);
    assert_ne!(a.returns, c.returns);
    assert!(a.std > 0.0);
    assert!(matches!(
        evaluate(&model.ckpt, &prompt, &td.task, 0, 30.0, 4),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #[test]
    fn normalization_is_affine_and_monotone(
        expert in -100.0f64..300.0,
        gap in 1.0f64..200.0,
        a in -500.0f64..500.0,
        b in -500.0f64..500.0,
    ) {
        let random = expert - gap;
        let n = |x| normalized_score(x, expert, random, "t").unwrap();
        prop_assert!((n(expert) - 100.0).abs() < 1e-9);
        prop_assert!(n(random).abs() < 1e-9);
        prop_assert_eq!(a < b, n(a) < n(b));
        let mid = (a + b) / 2.0;
        prop_assert!((n(mid) - (n(a) + n(b)) / 2.0).abs() < 1e-6);
    }
}

#[test]
fn degenerate_baselines_are_reported() {
    assert!(matches!(
        normalized_score(1.0, 5.0, 5.0, "vel/0"),
        Err(Error::DegenerateBaseline { .. })
    ));
}

#[test]
fn baselines_round_trip_and_order() {
    let tasks = enumerate_tasks(Family::PointVel1d, 3);
    let table = BaselineTable::compute(&tasks, 0.1, 10, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("baselines.json");
    table.save(&path).unwrap();
    let back = BaselineTable::load(&path).unwrap();
    assert_eq!(back.entries.len(), 3);
    for t in &tasks {
        let b = back.get(t).unwrap();
        assert!(b.expert > b.medium && b.medium > b.random);
        assert_eq!(b.normalized(b.expert).unwrap(), 100.0);
    }
    assert!(back.get(&enumerate_tasks(Family::PointDir2d, 2)[0]).is_err());
}

#[test]
fn every_method_runs_on_shared_samples() {
    let tasks = enumerate_tasks(Family::PointVel1d, 3);
    let model = common::pretrain(Family::PointVel1d, &tasks, 16, 5, 2, 3);
    let td = &model.tasks[2];
    let baseline = Baseline::compute(&td.task, model.medium_scale, 5, 1).unwrap();
    let cfg = AdaptConfig {
        tuner: TunerConfig {
            t: 2,
            m: 4,
            k: 4,
            ..TunerConfig::default()
        },
        finetune: FinetuneConfig {
            steps: 2,
            batch_size: 8,
            ..FinetuneConfig::default()
        },
        online_episodes: 2,
        eval_episodes: 3,
        ..AdaptConfig::default()
    };
    let sweep = Sweep {
        task: &td.task,
        baseline: &baseline,
        data: &td.data,
        cfg: &cfg,
        seeds: &[0],
        config_hash: Some("h"),
    };
    let rows = sweep.samples(&model.ckpt, &[Some(16), None], Quality::Medium, Quality::Expert).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].n_samples, 16);
    assert_eq!(rows[1].n_samples, 16);
    assert_eq!(rows[3].n_samples, 10 * td.task.horizon);
    assert_eq!(rows[2].n_samples, 256.min(rows[3].n_samples));
    assert!(rows.iter().all(|r| r.task == "point-vel-1d/2" && r.config_hash.as_deref() == Some("h")));

    let prompt = initial_prompt(&model.ckpt, &td.task, &td.data, Quality::Medium, 0).unwrap();
    let (samples, windows) = sample_set(&td.data, Quality::Expert, Some(16), 5, 0).unwrap();
    let trial = Trial {
        ckpt: &model.ckpt,
        task: &td.task,
        baseline: &baseline,
        samples: &samples,
        windows: &windows,
        prompt: &prompt,
        cfg: &cfg,
        seed: 0,
    };
    let untuned = trial.run(Method::PromptDt).unwrap();
    let online = trial.run(Method::PtdtOnline).unwrap();
    assert_eq!(online.n_samples, 2 * 4 * 2);
    assert_eq!(online.trace.unwrap().oracle_calls(), 8);
    assert_eq!(untuned.prompt, prompt);
    // The untuned row of a trial is its own baseline: same seed, same result.
    assert_eq!(trial.run(Method::PromptDt).unwrap().eval.returns, untuned.eval.returns);

    let json = serde_json::to_string(&rows[0]).unwrap();
    assert!(json.contains("\"method\":\"ptdt-offline\""));
    assert_eq!(serde_json::from_str::<AblationRow>(&json).unwrap(), rows[0]);
}
