use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;

const CONFIG: &str = r#"
[env]
family = "point-vel-1d"
n_train = 3
n_test = 1
episodes_per_task = 10
calibration_episodes = 10
baseline_episodes = 5

[model]
d_embed = 16
k = 5
k_star = 2

[pretrain]
iterations = 2

[adapt]
eval_episodes = 3
offline_batches = 2
offline_batch_size = 8
online_episodes = 2

[adapt.tuner]
t = 3
m = 4
k = 4

[adapt.finetune]
steps = 2
batch_size = 8

[ablate]
sizes = [8]
include_full = false
seeds = [0, 1]
"#;

fn ptdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptdt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = ptdt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Config file, dataset and checkpoint, built once per test binary.
struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        std::fs::write(&config, CONFIG).unwrap();
        let data = root.join("data");
        ok(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&data), "--json"]);
        let train = root.join("train");
        let summary = ok(&["pretrain", "--config", s(&config), "--data", s(&data), "--out", s(&train), "--json"]);
        assert_eq!(summary["iterations"], 2);
        Setup {
            _dir: dir,
            config,
            data,
            ckpt: train.join("model.json"),
            root,
        }
    })
}

#[test]
fn artifacts_embed_config_hash_and_version() {
    let st = setup();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(st.data.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(manifest["format_version"], 1);
    let file = manifest["files"]["point-vel-1d/3"].as_str().unwrap();
    let first = std::fs::read_to_string(st.data.join(file)).unwrap();
    let row: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(row["config_hash"], hash.as_str());
    assert_eq!(row["format_version"], 1);
    let snapshot = std::fs::read_to_string(st.data.join("config.toml")).unwrap();
    assert!(snapshot.contains(&hash) && snapshot.contains("seed = 3"));

    let ckpt: Value = serde_json::from_str(&std::fs::read_to_string(&st.ckpt).unwrap()).unwrap();
    assert_eq!(ckpt["format_version"], 1);
    assert!(ckpt.to_string().contains("config_hash"));
}

#[test]
fn tune_twice_gives_identical_traces() {
    let st = setup();
    let run = |name: &str| {
        let out = st.root.join(name);
        let summary = ok(&[
            "tune", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
            "--oracle", "offline", "--samples", "32", "--seed", "7", "--out", s(&out), "--json",
        ]);
        (out, summary)
    };
    let (a, sa) = run("tune-a");
    let (b, sb) = run("tune-b");
    let ta = std::fs::read(a.join("trace.jsonl")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trace.jsonl")).unwrap());
    assert_eq!(sa["tuned"], sb["tuned"]);
    assert_eq!(sa["iterations"], 3);
    assert_eq!(sa["n_samples"], 16);
    let header: Value = serde_json::from_str(std::str::from_utf8(&ta).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["config_hash"], sa["config_hash"]);

    // The tuned prompt evaluates to the reported score.
    let eval = ok(&[
        "eval", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
        "--prompt", s(&a.join("prompt.json")), "--seed", "7", "--out", s(&st.root.join("eval")), "--json",
    ]);
    assert_eq!(eval["score"]["raw"], sa["tuned"]["raw"]);

    let plot = ok(&["plot", s(&a.join("trace.jsonl")), "--json"]);
    let written = plot["written"].as_array().unwrap();
    assert!(!written.is_empty());
    let svg = std::fs::read_to_string(written[0].as_str().unwrap()).unwrap();
    assert!(svg.starts_with("<svg"));

    let online = ok(&[
        "tune", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
        "--oracle", "online", "--out", s(&st.root.join("tune-online")), "--json",
    ]);
    assert_eq!(online["oracle_calls"], 12);
    assert_eq!(online["n_samples"], 3 * 4 * 2);
}

#[test]
fn ablate_writes_one_row_per_method_size_and_seed() {
    let st = setup();
    let out = st.root.join("ablate");
    let summary = ok(&[
        "ablate", "--config", s(&st.config), "--kind", "samples", "--checkpoint", s(&st.ckpt), "--data",
        s(&st.data), "--out", s(&out), "--json",
    ]);
    assert_eq!(summary["rows"], 4);
    let text = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut keys: Vec<(String, u64)> = rows
        .iter()
        .map(|r| (r["method"].as_str().unwrap().to_string(), r["seed"].as_u64().unwrap()))
        .collect();
    keys.sort();
    assert_eq!(
        keys,
        [("prompt-dt-ft".into(), 0), ("prompt-dt-ft".into(), 1), ("ptdt-offline".into(), 0), ("ptdt-offline".into(), 1)]
    );
    assert!(rows.iter().all(|r| r["size"] == 8 && r["config_hash"] == summary["config_hash"]));
    let plot = ok(&["plot", s(&out.join("results.jsonl")), "--json"]);
    assert_eq!(plot["written"].as_array().unwrap().len(), 1);
}

#[test]
fn finetune_full_saves_a_child_checkpoint() {
    let st = setup();
    let out = st.root.join("ft");
    let summary = ok(&[
        "finetune-full", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
        "--samples", "8", "--out", s(&out), "--json",
    ]);
    assert_eq!(summary["steps"], 2);
    assert_eq!(summary["n_samples"], 8);
    let child: Value = serde_json::from_str(&std::fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert!(child.to_string().contains("\"parent\":\""));
}

#[test]
fn failures_exit_with_the_right_codes() {
    let st = setup();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = ptdt(&[
        "tune", "--checkpoint", s(&st.ckpt), "--data", s(&missing), "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains(s(&missing)), "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[pretrain]\nitarations = 3\n").unwrap();
    let out = ptdt(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("itarations"));

    assert_eq!(ptdt(&["tune", "--no-such-flag"]).status.code(), Some(2));

    let out = ptdt(&[
        "tune", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
        "--kstar", "7", "--out", s(&dir.path().join("k")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K*=2"));
}

#[test]
fn serve_runs_a_session_until_aborted() {
    let st = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ptdt"))
        .args([
            "serve", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--data", s(&st.data),
            "--port", "0", "--out", s(dir.path()), "--json",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = serde_json::from_str::<Value>(&line).unwrap()["url"].as_str().unwrap().to_string();
    let c = reqwest::blocking::Client::new();
    let session: Value = c.get(format!("{url}/api/session")).send().unwrap().json().unwrap();
    assert_eq!((session["m"].as_u64(), session["k"].as_u64()), (Some(6), Some(6)));
    assert_eq!(c.post(format!("{url}/api/abort")).send().unwrap().status().as_u16(), 200);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["state"], "aborted");
    assert!(dir.path().join("session/session.json").exists());
}
