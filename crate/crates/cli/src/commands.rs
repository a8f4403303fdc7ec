//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::{json, Value};

use ptdt_core::artifact::{config_hash, read_json, write_json, write_jsonl};
use ptdt_core::dtmodel::Checkpoint;
use ptdt_core::envs::{calibrate_medium, generate_dataset, split_tasks, QualityMix, TaskSpec};
use ptdt_core::eval::ablate::{
    initial_prompt, mean_normalized, sample_set, AblationKind, AblationRow, Method, MethodResult, Sweep, Trial,
};
use ptdt_core::eval::{evaluate, Baseline, BaselineTable};
use ptdt_core::plot::{heat_map, line_chart, Series};
use ptdt_core::pretrain::{finetune_full, train_multitask, LogRow};
use ptdt_core::seeds::derive_seed;
use ptdt_core::trajdata::{EpisodeSet, PromptSegment};
use ptdt_core::zorank::{TuneTrace, TunerConfig};
use ptdt_core::FORMAT_VERSION;
use ptdt_rankserve::{ServeOptions, SessionFile, SessionSpec, TunerState};

use crate::config::{Config, OracleKind};
use crate::data::{Dataset, Manifest, BASELINES};
use crate::{Cli, Command, Common, Source};

/// Output directory of one invocation, holding the resolved config.
struct Run {
    dir: PathBuf,
    hash: String,
    json: bool,
}

impl Run {
    fn create(common: &Common, cfg: &Config, command: &str) -> anyhow::Result<Self> {
        let dir = match &common.out {
            Some(out) => out.clone(),
            None => {
                let name = cfg.name.clone().unwrap_or_else(|| command.to_string());
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = cfg.runs_dir.join(format!("{stamp}-{name}"));
                let mut dir = base.clone();
                let mut n = 1;
                while dir.exists() {
                    n += 1;
                    dir = PathBuf::from(format!("{}-{n}", base.display()));
                }
                dir
            }
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = config_hash(cfg);
        let snapshot = format!("# command: {command}\n# config_hash: {hash}\n{}", cfg.to_toml());
        std::fs::write(dir.join("config.toml"), snapshot).with_context(|| format!("writing {}", dir.display()))?;
        Ok(Self {
            dir,
            hash,
            json: common.json,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `summary.json` and prints the summary.
    fn finish(&self, summary: Value, lines: &[String]) -> anyhow::Result<()> {
        let mut summary = summary;
        if let Value::Object(map) = &mut summary {
            map.insert("format_version".into(), json!(FORMAT_VERSION));
            map.insert("config_hash".into(), json!(self.hash));
            map.insert("out".into(), json!(self.dir));
        }
        write_json(&self.path("summary.json"), &summary)?;
        if self.json {
            println!("{summary}");
        } else {
            for l in lines {
                println!("{l}");
            }
            println!("outputs in {}", self.dir.display());
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = Config::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.common.name {
        cfg.name = Some(name.clone());
    }
    // Stages derive their streams from the base seed; the snapshot says so.
    cfg.pretrain.seed = cfg.seed;
    cfg.adapt.tuner.seed = cfg.seed;
    cfg.adapt.finetune.seed = cfg.seed;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let common = cli.common.clone();
    match cli.command {
        Command::GenData {
            family,
            n_train,
            n_test,
            episodes,
        } => {
            set(&mut cfg.env.family, family);
            set(&mut cfg.env.n_train, n_train);
            set(&mut cfg.env.n_test, n_test);
            set(&mut cfg.env.episodes_per_task, episodes);
            gen_data(&common, &cfg)
        }
        Command::Pretrain { data, iterations, kstar } => {
            set(&mut cfg.pretrain.iterations, iterations);
            if kstar.is_some() {
                cfg.model.k_star = kstar;
            }
            pretrain(&common, &cfg, &data)
        }
        Command::Tune {
            src,
            oracle,
            prompt_init,
            samples,
            kstar,
            iterations,
        } => {
            set(&mut cfg.tune.oracle, oracle);
            set(&mut cfg.tune.prompt_init, prompt_init);
            set(&mut cfg.tune.task, src.task);
            set(&mut cfg.adapt.tuner.t, iterations);
            if samples.is_some() {
                cfg.tune.samples = samples;
            }
            tune(&common, &cfg, &src, kstar)
        }
        Command::FinetuneFull {
            src,
            samples,
            prompt_init,
        } => {
            set(&mut cfg.tune.prompt_init, prompt_init);
            set(&mut cfg.tune.task, src.task);
            if samples.is_some() {
                cfg.tune.samples = samples;
            }
            finetune(&common, &cfg, &src)
        }
        Command::Eval {
            src,
            prompt,
            prompt_init,
            episodes,
        } => {
            set(&mut cfg.tune.prompt_init, prompt_init);
            set(&mut cfg.tune.task, src.task);
            set(&mut cfg.adapt.eval_episodes, episodes);
            eval(&common, &cfg, &src, prompt.as_deref())
        }
        Command::Ablate {
            kind,
            checkpoint,
            data,
            task,
            samples,
        } => {
            set(&mut cfg.ablate.kind, kind);
            set(&mut cfg.tune.task, task);
            if samples.is_some() {
                cfg.tune.samples = samples;
            }
            ablate(&common, &cfg, &checkpoint, &data)
        }
        Command::Serve {
            port,
            session_dir,
            reveal_returns,
            ui_dir,
            checkpoint,
            data,
            task,
            prompt_init,
        } => {
            set(&mut cfg.serve.port, port);
            cfg.serve.reveal_returns |= reveal_returns;
            if session_dir.is_some() {
                cfg.serve.session_dir = session_dir;
            }
            if ui_dir.is_some() {
                cfg.serve.ui_dir = ui_dir;
            }
            set(&mut cfg.tune.task, task);
            set(&mut cfg.tune.prompt_init, prompt_init);
            serve(&common, &cfg, checkpoint.as_deref(), data.as_deref())
        }
        Command::Plot { inputs } => plot(&common, &inputs),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen_data(common: &Common, cfg: &Config) -> anyhow::Result<()> {
    let run = Run::create(common, cfg, "gen-data")?;
    let env = &cfg.env;
    let (train, test) = split_tasks(env.family, env.n_train, env.n_test)?;
    let all: Vec<TaskSpec> = train.iter().chain(&test).cloned().collect();
    let calibration = calibrate_medium(&all, env.calibration_episodes, derive_seed(cfg.seed, &[0xCA]))?;
    let mut files = BTreeMap::new();
    let mut lines = vec![format!(
        "{}: medium noise scale {:.4} (normalized return {:.3})",
        env.family, calibration.scale, calibration.normalized
    )];
    for task in &all {
        let seed = derive_seed(cfg.seed, &[0xDA, task.task_index as u64]);
        let mut set = generate_dataset(task, QualityMix::Gradient, env.episodes_per_task, seed, calibration.scale)?;
        set.config_hash = Some(run.hash.clone());
        let file = format!("task-{}.jsonl", task.task_index);
        set.save(&run.path(&file))?;
        lines.push(format!(
            "  task {} ({}): {} episodes, mean return {:.2}",
            task.task_index,
            task.describe(),
            set.len(),
            set.mean_return()
        ));
        files.insert(BaselineTable::key(task), file);
    }
    let baselines = BaselineTable::compute(&all, calibration.scale, env.baseline_episodes, derive_seed(cfg.seed, &[0xBA]))?;
    baselines.save(&run.path(BASELINES))?;
    Dataset::save_manifest(
        &run.dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            config_hash: run.hash.clone(),
            family: env.family,
            medium_scale: calibration.scale,
            train: train.clone(),
            test: test.clone(),
            files,
        },
    )?;
    run.finish(
        json!({
            "command": "gen-data",
            "family": env.family,
            "medium_scale": calibration.scale,
            "train": train.iter().map(|t| t.task_index).collect::<Vec<_>>(),
            "test": test.iter().map(|t| t.task_index).collect::<Vec<_>>(),
        }),
        &lines,
    )
}

fn pretrain(common: &Common, cfg: &Config, data: &Path) -> anyhow::Result<()> {
    let ds = Dataset::open(data)?;
    let run = Run::create(common, cfg, "pretrain")?;
    let model = cfg.model.resolve(ds.manifest.family);
    let tasks = ds.train_data()?;
    let (mut ckpt, log) = train_multitask(&tasks, &model, &cfg.pretrain, Some(&run.path("log.jsonl")))?;
    ckpt.lineage.config_hash = Some(run.hash.clone());
    ckpt.save(&run.path("model.json"))?;
    let last = log.last().map(|r| r.task_loss.iter().sum::<f64>() / r.task_loss.len().max(1) as f64);
    run.finish(
        json!({
            "command": "pretrain",
            "checkpoint": run.path("model.json"),
            "content_hash": ckpt.content_hash(),
            "params": ckpt.param_count(),
            "iterations": log.len(),
            "final_loss": last,
        }),
        &[
            format!(
                "pretrained {} parameters on {} tasks for {} iterations",
                ckpt.param_count(),
                tasks.len(),
                log.len()
            ),
            format!("final mean loss {:.5}", last.unwrap_or(f64::NAN)),
        ],
    )
}

/// Checkpoint, held-out task and its data shared by the adaptation commands.
struct Target {
    ckpt: Checkpoint,
    task: TaskSpec,
    data: EpisodeSet,
    baseline: Baseline,
}

impl Target {
    fn load(ckpt: &Path, data: &Path, task: usize) -> anyhow::Result<Self> {
        let ds = Dataset::open(data)?;
        let ckpt = Checkpoint::load(ckpt)?;
        let task = ds.test_task(task)?.clone();
        if ckpt.config.d_s != task.family.state_dim() || ckpt.config.d_a != task.family.action_dim() {
            bail!("checkpoint does not match the {} tasks in {}", task.family, data.display());
        }
        Ok(Self {
            data: ds.episodes(&task)?,
            baseline: ds.baseline(&task)?,
            ckpt,
            task,
        })
    }

    fn trial<'a>(
        &'a self,
        cfg: &'a Config,
        prompt: &'a PromptSegment,
        samples: &'a EpisodeSet,
        windows: &'a [ptdt_core::trajdata::Window],
    ) -> Trial<'a> {
        Trial {
            ckpt: &self.ckpt,
            task: &self.task,
            baseline: &self.baseline,
            samples,
            windows,
            prompt,
            cfg: &cfg.adapt,
            seed: cfg.seed,
        }
    }
}

#[derive(Serialize)]
struct Score {
    raw: f64,
    std: f64,
    normalized: f64,
}

impl From<&MethodResult> for Score {
    fn from(r: &MethodResult) -> Self {
        Self {
            raw: r.eval.mean,
            std: r.eval.std,
            normalized: r.normalized,
        }
    }
}

fn score_line(label: &str, s: &Score) -> String {
    format!("{label:>8}: return {:.2} ± {:.2}, normalized {:.1}", s.raw, s.std, s.normalized)
}

fn tune(common: &Common, cfg: &Config, src: &Source, kstar: Option<usize>) -> anyhow::Result<()> {
    let target = Target::load(&src.checkpoint, &src.data, cfg.tune.task)?;
    if let Some(k) = kstar.filter(|&k| k != target.ckpt.config.k_star) {
        bail!(
            "--kstar {k} does not match the checkpoint, which was trained with K*={}",
            target.ckpt.config.k_star
        );
    }
    let run = Run::create(common, cfg, "tune")?;
    let prompt = initial_prompt(&target.ckpt, &target.task, &target.data, cfg.tune.prompt_init, cfg.seed)?;
    let (samples, windows) = match cfg.tune.oracle {
        OracleKind::External => (EpisodeSet::default(), Vec::new()),
        _ => sample_set(
            &target.data,
            cfg.tune.data_quality,
            cfg.tune.samples,
            target.ckpt.config.k,
            cfg.seed,
        )?,
    };
    let untuned = target.trial(cfg, &prompt, &samples, &windows).run(Method::PromptDt)?;
    let (tuned_prompt, mut trace, n_samples, tuned) = match cfg.tune.oracle {
        OracleKind::Offline | OracleKind::Online => {
            let method = if cfg.tune.oracle == OracleKind::Offline {
                Method::PtdtOffline
            } else {
                Method::PtdtOnline
            };
            let r = target.trial(cfg, &prompt, &samples, &windows).run(method)?;
            let trace = r.trace.clone().context("tuning produced no trace")?;
            (r.prompt.clone(), trace, r.n_samples, r)
        }
        OracleKind::External => {
            let spec = session_spec(cfg, &src.checkpoint, &target, prompt.clone())?;
            let server = start_session(cfg, &run.path("session"), Some(spec), common.json)?;
            let state = server.wait();
            server.shutdown();
            let session = run.path("session");
            let trace = TuneTrace::load(&SessionFile::trace_path(&session))?;
            if state != TunerState::Finished {
                bail!("ranking session ended {state:?} after {} iterations", trace.iterations.len());
            }
            let tuned_prompt: PromptSegment = read_json(&session.join("prompt.json"))?;
            let r = target.trial(cfg, &tuned_prompt, &samples, &windows).run(Method::PromptDt)?;
            let n = trace.oracle_calls() * cfg.serve.episodes;
            (tuned_prompt, trace, n, r)
        }
    };
    trace.header.config_hash = Some(run.hash.clone());
    trace.save(&run.path("trace.jsonl"))?;
    write_json(&run.path("prompt.json"), &tuned_prompt)?;
    let (before, after) = (Score::from(&untuned), Score::from(&tuned));
    let lines = vec![
        format!(
            "{} oracle, {} iterations, {} oracle calls, {} prompt parameters",
            oracle_name(cfg.tune.oracle),
            trace.iterations.len(),
            trace.oracle_calls(),
            trace.header.d_x
        ),
        score_line("untuned", &before),
        score_line("tuned", &after),
    ];
    run.finish(
        json!({
            "command": "tune",
            "oracle": cfg.tune.oracle,
            "task": BaselineTable::key(&target.task),
            "n_samples": n_samples,
            "iterations": trace.iterations.len(),
            "oracle_calls": trace.oracle_calls(),
            "d_x": trace.header.d_x,
            "param_ratio": trace.header.param_ratio,
            "aborted": trace.summary.as_ref().and_then(|s| s.aborted.clone()),
            "untuned": before,
            "tuned": after,
        }),
        &lines,
    )
}

fn oracle_name(kind: OracleKind) -> &'static str {
    match kind {
        OracleKind::Offline => "offline",
        OracleKind::Online => "online",
        OracleKind::External => "external",
    }
}

fn finetune(common: &Common, cfg: &Config, src: &Source) -> anyhow::Result<()> {
    let target = Target::load(&src.checkpoint, &src.data, cfg.tune.task)?;
    let run = Run::create(common, cfg, "finetune-full")?;
    let prompt = initial_prompt(&target.ckpt, &target.task, &target.data, cfg.tune.prompt_init, cfg.seed)?;
    let (samples, windows) = sample_set(
        &target.data,
        cfg.tune.data_quality,
        cfg.tune.samples,
        target.ckpt.config.k,
        cfg.seed,
    )?;
    let before = target.trial(cfg, &prompt, &samples, &windows).run(Method::PromptDt)?;
    let mut ft = cfg.adapt.finetune.clone();
    ft.seed = derive_seed(cfg.seed, &[0xF7]);
    let out = finetune_full(&target.ckpt, &samples, &windows, &prompt, &ft)?;
    let mut ckpt = out.checkpoint;
    ckpt.lineage.config_hash = Some(run.hash.clone());
    ckpt.save(&run.path("model.json"))?;
    write_json(&run.path("prompt.json"), &prompt)?;
    let after = Trial {
        ckpt: &ckpt,
        ..target.trial(cfg, &prompt, &samples, &windows)
    }
    .run(Method::PromptDt)?;
    let (before, after) = (Score::from(&before), Score::from(&after));
    run.finish(
        json!({
            "command": "finetune-full",
            "task": BaselineTable::key(&target.task),
            "n_samples": windows.len(),
            "windows_touched": out.touched,
            "steps": out.losses.len(),
            "losses": out.losses,
            "checkpoint": run.path("model.json"),
            "before": before,
            "after": after,
        }),
        &[
            format!("fine-tuned on {} windows for {} steps", windows.len(), ft.steps),
            score_line("before", &before),
            score_line("after", &after),
        ],
    )
}

fn eval(common: &Common, cfg: &Config, src: &Source, prompt: Option<&Path>) -> anyhow::Result<()> {
    let target = Target::load(&src.checkpoint, &src.data, cfg.tune.task)?;
    let run = Run::create(common, cfg, "eval")?;
    let prompt = match prompt {
        Some(p) => read_json::<PromptSegment>(p)?,
        None => initial_prompt(&target.ckpt, &target.task, &target.data, cfg.tune.prompt_init, cfg.seed)?,
    };
    let result = evaluate(
        &target.ckpt,
        &prompt,
        &target.task,
        cfg.adapt.eval_episodes,
        target.baseline.target_rtg(),
        derive_seed(cfg.seed, &[0xE0]),
    )?;
    let score = Score {
        raw: result.mean,
        std: result.std,
        normalized: target.baseline.normalized(result.mean)?,
    };
    run.finish(
        json!({
            "command": "eval",
            "task": BaselineTable::key(&target.task),
            "episodes": result.returns.len(),
            "returns": result.returns,
            "score": score,
        }),
        &[score_line("eval", &score)],
    )
}

fn ablate(common: &Common, cfg: &Config, checkpoints: &[PathBuf], data: &Path) -> anyhow::Result<()> {
    let kind = cfg.ablate.kind;
    if kind != AblationKind::PromptLength && checkpoints.len() != 1 {
        bail!("only the prompt-length sweep takes more than one checkpoint");
    }
    let target = Target::load(&checkpoints[0], data, cfg.tune.task)?;
    let run = Run::create(common, cfg, "ablate")?;
    let sweep = Sweep {
        task: &target.task,
        baseline: &target.baseline,
        data: &target.data,
        cfg: &cfg.adapt,
        seeds: &cfg.ablate.seeds,
        config_hash: Some(&run.hash),
    };
    let (pq, dq) = (cfg.tune.prompt_init, cfg.tune.data_quality);
    let rows = match kind {
        AblationKind::Samples => {
            let mut sizes: Vec<Option<usize>> = cfg.ablate.sizes.iter().copied().map(Some).collect();
            if cfg.ablate.include_full {
                sizes.push(None);
            }
            sweep.samples(&target.ckpt, &sizes, pq, dq)?
        }
        AblationKind::PromptInit => sweep.prompt_init(&target.ckpt, cfg.tune.samples)?,
        AblationKind::PromptLength => {
            let mut ckpts = vec![target.ckpt.clone()];
            for path in &checkpoints[1..] {
                ckpts.push(Checkpoint::load(path)?);
            }
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            sweep.prompt_length(&refs, cfg.tune.samples, pq, dq)?
        }
    };
    write_jsonl(&run.path("results.jsonl"), &rows)?;
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        let setting = match kind {
            AblationKind::Samples => format!("n={}", r.n_samples),
            AblationKind::PromptInit => format!("prompt={} data={}", r.prompt_quality, r.data_quality),
            AblationKind::PromptLength => format!("K*={}", r.k_star),
        };
        groups.entry((setting, r.method.to_string())).or_default().push(r.normalized);
    }
    let lines: Vec<String> = groups
        .iter()
        .map(|((setting, method), v)| {
            format!(
                "{setting:<28} {method:<14} normalized {:.1} over {} seeds",
                v.iter().sum::<f64>() / v.len() as f64,
                v.len()
            )
        })
        .collect();
    run.finish(
        json!({
            "command": "ablate",
            "kind": kind,
            "rows": rows.len(),
            "results": run.path("results.jsonl"),
            "mean_normalized": mean_normalized(&rows, |_| true),
        }),
        &lines,
    )
}

fn session_spec(cfg: &Config, checkpoint: &Path, target: &Target, prompt: PromptSegment) -> anyhow::Result<SessionSpec> {
    let checkpoint = std::fs::canonicalize(checkpoint).with_context(|| format!("resolving {}", checkpoint.display()))?;
    Ok(SessionSpec {
        checkpoint,
        task: target.task.clone(),
        prompt,
        tuner: TunerConfig {
            m: cfg.serve.m,
            k: cfg.serve.k,
            seed: derive_seed(cfg.seed, &[0x7E]),
            ..cfg.adapt.tuner.clone()
        },
        episodes: cfg.serve.episodes,
        target_rtg: target.baseline.target_rtg(),
        rollout_seed: derive_seed(cfg.seed, &[0x0E]),
    })
}

fn start_session(
    cfg: &Config,
    dir: &Path,
    spec: Option<SessionSpec>,
    quiet: bool,
) -> anyhow::Result<ptdt_rankserve::RunningServer> {
    let opts = ServeOptions {
        port: cfg.serve.port,
        host: [127, 0, 0, 1],
        session_dir: dir.to_path_buf(),
        ui_dir: cfg.serve.ui_dir.clone(),
        reveal_returns: cfg.serve.reveal_returns,
    };
    let server = ptdt_rankserve::start(opts, spec)?;
    if quiet {
        eprintln!("{}", json!({ "url": server.url(), "session_dir": dir }));
    } else {
        eprintln!("ranking session at {} (state in {})", server.url(), dir.display());
    }
    Ok(server)
}

fn serve(common: &Common, cfg: &Config, checkpoint: Option<&Path>, data: Option<&Path>) -> anyhow::Result<()> {
    let run = Run::create(common, cfg, "serve")?;
    let dir = cfg.serve.session_dir.clone().unwrap_or_else(|| run.path("session"));
    let spec = if SessionFile::path(&dir).exists() {
        None
    } else {
        let (Some(ckpt), Some(data)) = (checkpoint, data) else {
            bail!(
                "no session in {}; pass --checkpoint and --data to start one",
                dir.display()
            );
        };
        let target = Target::load(ckpt, data, cfg.tune.task)?;
        let prompt = initial_prompt(&target.ckpt, &target.task, &target.data, cfg.tune.prompt_init, cfg.seed)?;
        Some(session_spec(cfg, ckpt, &target, prompt)?)
    };
    let server = start_session(cfg, &dir, spec, common.json)?;
    let state = server.wait();
    server.shutdown();
    let trace_path = SessionFile::trace_path(&dir);
    let iterations = if trace_path.exists() {
        TuneTrace::load(&trace_path)?.iterations.len()
    } else {
        0
    };
    run.finish(
        json!({
            "command": "serve",
            "session_dir": dir,
            "state": state,
            "iterations": iterations,
        }),
        &[format!("session {state:?} after {iterations} iterations")],
    )
}

fn plot(common: &Common, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut written = Vec::new();
    for input in inputs {
        let out_dir = match &common.out {
            Some(d) => d.clone(),
            None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
        let first: Value = serde_json::from_str(text.lines().next().unwrap_or("null"))
            .with_context(|| format!("{} is not JSON Lines", input.display()))?;
        let charts = if first.get("kind").and_then(Value::as_str) == Some("header") {
            trace_charts(&TuneTrace::load(input)?)
        } else if first.get("method").is_some() {
            ablation_charts(&ptdt_core::artifact::read_jsonl::<AblationRow>(input)?)
        } else if first.get("task_loss").is_some() {
            loss_charts(&ptdt_core::artifact::read_jsonl::<LogRow>(input)?)
        } else {
            bail!("{}: not a trace, result rows or training log", input.display());
        };
        for (suffix, svg) in charts {
            let path = out_dir.join(format!("{stem}-{suffix}.svg"));
            std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    if common.json {
        println!("{}", json!({ "command": "plot", "written": written }));
    } else {
        for p in &written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn trace_charts(trace: &TuneTrace) -> Vec<(String, String)> {
    let series = |label: &str, f: &dyn Fn(&ptdt_core::zorank::IterationRecord) -> Option<f64>| Series {
        label: label.into(),
        points: trace.iterations.iter().filter_map(|r| f(r).map(|v| (r.t as f64, v))).collect(),
    };
    let mut charts = vec![(
        "grad".to_string(),
        line_chart("Gradient estimate norm", "iteration", "norm", &[series("|g|", &|r| Some(r.grad_norm))]),
    )];
    let ret = series("return", &|r| r.eval_return);
    if !ret.points.is_empty() {
        charts.push(("return".into(), line_chart("Return of the iterate", "iteration", "return", &[ret])));
    }
    let best = series("best value", &|r| {
        r.values.as_ref().and_then(|v| v.iter().copied().min_by(f64::total_cmp))
    });
    if !best.points.is_empty() {
        charts.push(("values".into(), line_chart("Best candidate value", "iteration", "value", &[best])));
    }
    charts
}

fn ablation_charts(rows: &[AblationRow]) -> Vec<(String, String)> {
    let Some(kind) = rows.first().map(|r| r.kind) else {
        return Vec::new();
    };
    let mut by_method: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    match kind {
        AblationKind::PromptInit => {
            let mut charts = Vec::new();
            let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
            methods.dedup();
            for method in methods {
                let qs = ptdt_core::envs::Quality::ALL;
                let values: Vec<Vec<f64>> = qs
                    .iter()
                    .map(|&pq| {
                        qs.iter()
                            .map(|&dq| {
                                mean_normalized(rows, |r| r.method == method && r.prompt_quality == pq && r.data_quality == dq)
                                    .unwrap_or(f64::NAN)
                            })
                            .collect()
                    })
                    .collect();
                let names: Vec<String> = qs.iter().map(|q| q.to_string()).collect();
                let title = format!("{method}: prompt quality (rows) by data quality (columns)");
                charts.push((method.to_string(), heat_map(&title, &names, &names, &values)));
            }
            charts
        }
        AblationKind::Samples | AblationKind::PromptLength => {
            for r in rows {
                let x = if kind == AblationKind::Samples { r.n_samples } else { r.k_star } as i64;
                by_method
                    .entry(r.method.to_string())
                    .or_default()
                    .entry(x)
                    .or_default()
                    .push(r.normalized);
            }
            let series: Vec<Series> = by_method
                .into_iter()
                .map(|(label, pts)| Series {
                    label,
                    points: pts
                        .into_iter()
                        .map(|(x, v)| (x as f64, v.iter().sum::<f64>() / v.len() as f64))
                        .collect(),
                })
                .collect();
            let x_label = if kind == AblationKind::Samples { "samples" } else { "prompt length K*" };
            vec![("normalized".into(), line_chart("Normalized score", x_label, "normalized", &series))]
        }
    }
}

fn loss_charts(log: &[LogRow]) -> Vec<(String, String)> {
    let n_tasks = log.first().map_or(0, |r| r.task_loss.len());
    let series: Vec<Series> = (0..n_tasks)
        .map(|i| Series {
            label: format!("task {i}"),
            points: log.iter().map(|r| (r.iteration as f64, r.task_loss[i])).collect(),
        })
        .collect();
    vec![("loss".into(), line_chart("Pretraining loss", "iteration", "loss", &series))]
}
