use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lrfr::checkpoint;
use serde_json::{json, Value};

fn lrfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrfr")).args(args).output().unwrap()
}

fn config(seed: u64, methods: &[&str], train: Value) -> Value {
    json!({
        "seed": seed,
        "dataset": {
            "kind": "gaussian", "dim": 8, "classes_per_task": 2, "tasks": 2,
            "n_train": 120, "n_test": 60, "separation": 3.0
        },
        "architecture": { "hidden": [12, 12] },
        "train": train,
        "methods": methods,
    })
}

fn small_train() -> Value {
    json!({ "epochs": 4, "lr_milestones": [2, 3], "pretrain_epochs": 3, "batch_size": 16 })
}

fn run(dir: &Path, cfg: &Value, out: &str) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.join(out);
    lrfr(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"])
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn strip_timestamp(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("generated_at");
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &config(1, &["finetune"], small_train()), "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&dir.path().join("out")), ["finetune.csv", "finetune.json"]);
    let csv = std::fs::read_to_string(dir.path().join("out/finetune.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task,layer,rank,null_dim,audit"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let train = json!({ "lr": -0.1 });
    let o = run(dir.path(), &config(1, &["finetune"], train), "out");
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists() || files(&dir.path().join("out")).is_empty());

    let o = lrfr(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runs_are_reproducible_up_to_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, &["lrfr"], small_train());
    assert_eq!(run(dir.path(), &cfg, "a").status.code(), Some(0));
    assert_eq!(run(dir.path(), &cfg, "b").status.code(), Some(0));
    assert_eq!(
        strip_timestamp(&dir.path().join("a/lrfr.json")),
        strip_timestamp(&dir.path().join("b/lrfr.json"))
    );
    assert_eq!(
        std::fs::read(dir.path().join("a/lrfr.csv")).unwrap(),
        std::fs::read(dir.path().join("b/lrfr.csv")).unwrap()
    );
}

#[test]
fn inspect_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(5, &["lrfr", "nscl_full", "finetune"], small_train());
    assert_eq!(run(dir.path(), &cfg, "r").status.code(), Some(0));
    let art = |m: &str| dir.path().join(format!("r/{m}.json"));

    let o = lrfr(&["inspect", art("finetune").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| r.trim_end().ends_with("identity")));

    let o = lrfr(&["compare", art("lrfr").to_str().unwrap(), art("finetune").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["lrfr", "finetune"]);
    for label in ["ACC", "BWT"] {
        let line = text.lines().find(|l| l.starts_with(label)).unwrap();
        assert_eq!(line.split_whitespace().count(), 3);
    }

    let o = lrfr(&["compare", art("lrfr").to_str().unwrap(), art("nscl_full").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let deltas: Vec<i64> = text
        .lines()
        .skip_while(|l| !l.starts_with("null_dim delta"))
        .skip(2)
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(deltas.len(), 2 * 2);
    assert!(deltas.iter().all(|&d| d >= 0), "{deltas:?}");

    // different seed: not comparable
    let other = tempfile::tempdir().unwrap();
    assert_eq!(run(other.path(), &config(6, &["lrfr"], small_train()), "r").status.code(), Some(0));
    let o = lrfr(&[
        "compare",
        art("lrfr").to_str().unwrap(),
        other.path().join("r/lrfr.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_rejects_corrupt_artifact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &config(1, &["finetune"], small_train()), "r").status.code(), Some(0));
    let path: PathBuf = dir.path().join("r/finetune.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    let o = lrfr(&["inspect", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, &["lrfr"], small_train());
    cfg["checkpoints"] = json!(true);
    assert_eq!(run(dir.path(), &cfg, "r").status.code(), Some(0));
    let bytes = std::fs::read(dir.path().join("r/lrfr.net.bin")).unwrap();
    let net = checkpoint::read_network(bytes.as_slice()).unwrap();
    assert_eq!(net.layer_sizes(), &[8, 12, 12]);
    let mut again = Vec::new();
    checkpoint::write_network(&net, &mut again).unwrap();
    assert_eq!(again, bytes);

    let bytes = std::fs::read(dir.path().join("r/lrfr.tracker.bin")).unwrap();
    let tracker = checkpoint::read_tracker(bytes.as_slice()).unwrap();
    assert_eq!(tracker.dims(), vec![8, 12]);
    assert_eq!(tracker.seen_samples(), 2 * 120);
}
