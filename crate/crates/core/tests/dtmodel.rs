use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptdt_core::dtmodel::*;
use ptdt_core::envs::{enumerate_tasks, generate_dataset, Family, Quality, QualityMix};
use ptdt_core::eval::evaluate;
use ptdt_core::pretrain::*;
use ptdt_core::trajdata::*;
use ptdt_diffcore::Graph;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn tiny(k_star: usize, k: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_embed: 8,
        activation: Activation::Relu,
        k,
        k_star,
        d_s: 2,
        d_a: 1,
        d_r: 1,
        max_timestep: 100,
        mlp_ratio: 2,
        prompt_loss: false,
    }
}

fn vel_data(n: usize, seed: u64) -> (ptdt_core::envs::TaskSpec, EpisodeSet) {
    let task = enumerate_tasks(Family::PointVel1d, 10)[4].clone();
    let data = generate_dataset(&task, QualityMix::Gradient, n, seed, 0.1).unwrap();
    (task, data)
}

fn batch(cfg: &ModelConfig, data: &EpisodeSet, n: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = sample_windows(data, n, cfg.k, &mut rng).unwrap();
    let prompts: Vec<PromptSegment> = (0..n)
        .map(|_| sample_prompt(data, 4, cfg.k_star, None, &mut rng).unwrap())
        .collect();
    let refs: Vec<&PromptSegment> = prompts.iter().collect();
    window_batch(data, &windows, &refs, cfg.k, true).unwrap()
}

fn loss_f64(params: &ModelParams<f64>, cfg: &ModelConfig, norm: &Normalizer, b: &SequenceBatch) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars = params.on_graph(&mut g, false);
    let loss = dt_loss(&mut g, &vars, cfg, norm, b).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        prompt_loss: true,
        ..tiny(2, 3)
    };
    let (_, data) = vel_data(3, 1);
    let b = batch(&cfg, &data, 3, 2);
    let norm = Normalizer {
        state_mean: vec![1.0, 0.2],
        state_std: vec![0.8, 0.5],
        rtg_scale: 40.0,
    };
    // Larger init so every block contributes visibly to the loss.
    let mut params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    for t in params.tensors.iter_mut() {
        for v in t.make_mut() {
            *v *= 10.0;
        }
    }
    let mut g = Graph::<f64>::new();
    let vars = params.on_graph(&mut g, true);
    let loss = dt_loss(&mut g, &vars, &cfg, &norm, &b).unwrap();
    let grads = ModelParams::collect_grads(&g.backward(loss).unwrap(), &vars).unwrap();

    let h = 1e-6;
    let mut checked = 0;
    for (pi, name) in params.names.clone().iter().enumerate() {
        for i in 0..params.tensors[pi].len() {
            let mut plus = params.clone();
            plus.tensors[pi].make_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors[pi].make_mut()[i] -= h;
            let numeric = (loss_f64(&plus, &cfg, &norm, &b) - loss_f64(&minus, &cfg, &norm, &b)) / (2.0 * h);
            let analytic = grads[pi].data()[i];
            let err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-4);
            assert!(err < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
            checked += 1;
        }
    }
    assert_eq!(checked, params.count());
}

#[test]
fn predictions_ignore_the_future() {
    let cfg = tiny(3, 8);
    let (_, data) = vel_data(3, 5);
    let ckpt = Checkpoint::new(cfg.clone(), Normalizer::identity(2), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let l = cfg.steps();
    for trial in 0..100 {
        let b = batch(&cfg, &data, 1, trial);
        let before = ckpt.predict(&b).unwrap();
        // Change the action at step t and everything after it. Predictions
        // up to and including step t read only earlier tokens.
        let t = rng.gen_range(cfg.k_star..l);
        let mut changed = b.clone();
        for s in t..l {
            changed.actions[s] += rng.gen_range(-1.0..1.0);
            if s > t {
                changed.rtg[s] += rng.gen_range(-5.0..5.0);
                changed.states[2 * s] += rng.gen_range(-1.0..1.0);
            }
        }
        let after = ckpt.predict(&changed).unwrap();
        assert_eq!(before[..=t], after[..=t], "trial {trial}, step {t}");
        if t + 1 < l {
            assert_ne!(before[t + 1..], after[t + 1..]);
        }
    }
}

#[test]
fn pretraining_halves_the_loss() {
    // Expert actions are a function of the state, so the loss has no noise floor.
    let task = enumerate_tasks(Family::PointVel1d, 10)[4].clone();
    let data = generate_dataset(&task, QualityMix::Only(Quality::Expert), 4, 3, 0.1).unwrap();
    let tasks = vec![TaskData { task, data }];
    let model = ModelConfig {
        d_embed: 16,
        ..tiny(2, 5)
    };
    let cfg = PretrainConfig {
        iterations: 20,
        steps_per_iter: 10,
        batch_per_task: 16,
        optim: OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        },
        ..PretrainConfig::default()
    };
    let (_, log) = train_multitask(&tasks, &model, &cfg, None).unwrap();
    let first = log[0].task_loss[0];
    let last = log.last().unwrap().task_loss[0];
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

fn small_pretrain(seed: u64) -> (Checkpoint, TaskData) {
    let (task, data) = vel_data(6, 7);
    let tasks = vec![TaskData { task, data }];
    let cfg = PretrainConfig {
        iterations: 3,
        steps_per_iter: 2,
        batch_per_task: 4,
        seed,
        ..PretrainConfig::default()
    };
    let (ckpt, _) = train_multitask(&tasks, &tiny(2, 5), &cfg, None).unwrap();
    (ckpt, tasks.into_iter().next().unwrap())
}

#[test]
fn pretraining_is_seed_deterministic() {
    let (a, _) = small_pretrain(5);
    let (b, _) = small_pretrain(5);
    let (c, _) = small_pretrain(6);
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn checkpoint_round_trip_reproduces_returns() {
    let (ckpt, td) = small_pretrain(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.content_hash(), ckpt.content_hash());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = sample_prompt(&td.data, 4, 2, Some(Quality::Expert), &mut rng).unwrap();
    let a = evaluate(&ckpt, &prompt, &td.task, 3, 40.0, 2).unwrap();
    let b = evaluate(&back, &prompt, &td.task, 3, 40.0, 2).unwrap();
    assert_eq!(a.returns, b.returns);
}

#[test]
fn corrupted_blob_is_rejected() {
    let (ckpt, _) = small_pretrain(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let blob = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p != &path)
        .expect("blob file");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn zero_step_finetune_is_identity_and_windows_are_all_used() {
    let (ckpt, td) = small_pretrain(2);
    let windows = all_windows(&td.data.slice(0, 1), 5);
    let prompt = PromptSegment::from_episode(&td.data.episodes[5], 5, 0, 2);
    let zero = FinetuneConfig {
        steps: 0,
        ..FinetuneConfig::default()
    };
    let out = finetune_full(&ckpt, &td.data, &windows, &prompt, &zero).unwrap();
    assert_eq!(out.checkpoint.content_hash(), ckpt.content_hash());
    assert_eq!(out.touched, 0);

    let cfg = FinetuneConfig {
        steps: 4,
        batch_size: 25,
        ..FinetuneConfig::default()
    };
    assert_eq!(windows.len(), 100);
    let out = finetune_full(&ckpt, &td.data, &windows, &prompt, &cfg).unwrap();
    assert_eq!(out.touched, windows.len());
    assert_eq!(out.losses.len(), 4);
    assert_ne!(out.checkpoint.content_hash(), ckpt.content_hash());
    assert_eq!(out.checkpoint.lineage.parent.as_deref(), Some(ckpt.content_hash().as_str()));
}
