//! Small pretrained models shared by the integration tests.

#![allow(dead_code)]

use ptdt_core::dtmodel::{Checkpoint, ModelConfig};
use ptdt_core::envs::{calibrate_medium, generate_dataset, Family, QualityMix, TaskSpec};
use ptdt_core::pretrain::{train_multitask, OptimConfig, PretrainConfig, TaskData};

pub struct Pretrained {
    pub ckpt: Checkpoint,
    pub tasks: Vec<TaskData>,
    pub medium_scale: f32,
}

/// Tasks with gradient-mix data; each task gets its own data seed.
pub fn task_data(tasks: &[TaskSpec], episodes: usize, seed: u64) -> (Vec<TaskData>, f32) {
    let scale = calibrate_medium(tasks, 30, 7).unwrap().scale;
    let data = tasks
        .iter()
        .map(|t| TaskData {
            task: t.clone(),
            data: generate_dataset(t, QualityMix::Gradient, episodes, seed + t.task_index as u64, scale).unwrap(),
        })
        .collect();
    (data, scale)
}

/// A small model trained for `iterations * 10` steps per task.
pub fn pretrain(family: Family, tasks: &[TaskSpec], d_embed: usize, k: usize, k_star: usize, iterations: usize) -> Pretrained {
    let (tasks, medium_scale) = task_data(tasks, 30, 1);
    let mut model = ModelConfig::reference(family.state_dim(), family.action_dim(), family.horizon());
    model.d_embed = d_embed;
    model.k = k;
    model.k_star = k_star;
    let cfg = PretrainConfig {
        iterations,
        optim: OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        },
        ..PretrainConfig::default()
    };
    let (ckpt, _) = train_multitask(&tasks, &model, &cfg, None).unwrap();
    Pretrained {
        ckpt,
        tasks,
        medium_scale,
    }
}
