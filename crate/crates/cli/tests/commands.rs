use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "sim": {"object_size": 48, "probe_size": 16, "aperture_radius": 4.0, "scan_step": 4},
  "engine": {"iterations": 12, "snapshot_iterations": [3, 12]},
  "train": {"patch_size": 32, "epochs": 1, "input_iteration": 3, "target_iteration": 12},
  "eval": {"i_ref": 8}
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ptyff"))
            .arg("--quiet")
            .arg("--config")
            .arg(self.path("small.json"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_the_dataset_contract() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_ptyff"))
        .args(["-q", "simulate", "--seed", "3", "--out"])
        .arg(ws.path("ds"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let ds = ws.path("ds");
    assert_eq!(
        listing(&ds),
        ["manifest.json", "patterns.bin", "positions.bin", "truth_object.bin", "truth_probe.bin"]
    );
    let m = manifest(&ds);
    let k = m["details"]["pattern_count"].as_u64().unwrap();
    let (h, w) = (m["details"]["pattern_shape"][0].as_u64().unwrap(), m["details"]["pattern_shape"][1].as_u64().unwrap());
    assert_eq!((k, h, w), (81, 32, 32));
    assert_eq!(fs::metadata(ds.join("patterns.bin")).unwrap().len(), k * h * w * 4);

    ws.ok(&["simulate", "--seed", "3", "--out", "small_a"]);
    ws.ok(&["simulate", "--seed", "3", "--out", "small_b"]);
    for f in ["patterns.bin", "positions.bin", "truth_object.bin", "truth_probe.bin"] {
        assert_eq!(fs::read(ws.path("small_a").join(f)).unwrap(), fs::read(ws.path("small_b").join(f)).unwrap());
    }
}

#[test]
fn reconstruct_pairs_train_and_evaluate() {
    let ws = Workspace::new();
    for i in 0..3 {
        ws.ok(&["simulate", "--seed", &i.to_string(), "--out", &format!("ds{i}")]);
    }
    let out = ws.ok(&["reconstruct", "ds0", "--operator", "none", "--iterations", "10", "--snapshots", "3,10", "--out", "r10"]);
    assert!(out.stdout.is_empty());
    let csv = fs::read_to_string(ws.path("r10/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(ws.path("r10/snapshot_3.bin").exists() && ws.path("r10/snapshot_10.bin").exists());

    for i in 0..3 {
        ws.ok(&["reconstruct", &format!("ds{i}"), "--seed", &i.to_string(), "--out", &format!("run{i}")]);
    }
    // a run without the target snapshot is skipped and recorded
    ws.ok(&["reconstruct", "ds0", "--snapshots", "3", "--out", "partial"]);
    let out = ws.ok(&["build-pairs", "run0", "run1", "run2", "partial", "--n-patches", "8", "--seed", "4", "--out", "pairs"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped"));
    let m = manifest(&ws.path("pairs"));
    assert_eq!(m["details"]["pair_count"], 24);
    assert_eq!(m["details"]["skipped"].as_array().unwrap().len(), 1);
    ws.ok(&["build-pairs", "run0", "run1", "run2", "--n-patches", "8", "--seed", "4", "--out", "pairs_again"]);
    for f in ["inputs.bin", "targets.bin"] {
        assert_eq!(fs::read(ws.path("pairs").join(f)).unwrap(), fs::read(ws.path("pairs_again").join(f)).unwrap());
    }

    ws.ok(&["train-ff", "pairs", "--epochs", "0", "--out", "w0"]);
    ws.ok(&["train-ff", "pairs", "--epochs", "0", "--out", "w0b"]);
    assert_eq!(fs::read(ws.path("w0/weights.bin")).unwrap(), fs::read(ws.path("w0b/weights.bin")).unwrap());
    assert_eq!(fs::read_to_string(ws.path("w0/train_curve.csv")).unwrap().lines().count(), 2);
    ws.ok(&["train-ff", "pairs", "--out", "w1"]);
    assert_eq!(listing(&ws.path("w1")), ["manifest.json", "train_curve.csv", "weights.bin", "weights.json"]);

    ws.ok(&["reconstruct", "ds0", "--i-ml", "5", "--operator", "w1", "--out", "ml0"]);
    let m = manifest(&ws.path("ml0"));
    assert_eq!(m["details"]["fast_forward_at"], 5);

    ws.ok(&["evaluate", "run0", "ml0", "--out", "eval"]);
    let mut files = listing(&ws.path("eval"));
    files.retain(|f| f != "maps");
    assert_eq!(files, ["curves.csv", "manifest.json", "report.json", "report.txt", "timing.json"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("eval/report.json")).unwrap()).unwrap();
    assert!(report["summary"]["baseline_final_nll"].is_number());
    assert!(report["summary"]["ml_final_nll"].is_number());
    assert!(report["summary"]["final_relative_gap"].is_number());
    let pgm = fs::read(ws.path("eval/maps/abs_diff.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    // identical runs: within epsilon by i_ref and matched timing ratio of one
    ws.ok(&["evaluate", "run0", "run0", "--out", "self"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("self/report.json")).unwrap()).unwrap();
    let i_eps = report["summary"]["i_epsilon"].as_u64().unwrap();
    assert!(i_eps <= 8);
    assert_eq!(report["difference"]["max_abs_diff"], 0.0);
    let timing: Value = serde_json::from_str(&fs::read_to_string(ws.path("self/timing.json")).unwrap()).unwrap();
    assert_eq!(timing["matched_speedup"], 1.0);

    ws.ok(&["sweep", "ds0", "--parameter", "i_ml", "--values", "3,5", "--operator", "w1", "--out", "sweep"]);
    let csv = fs::read_to_string(ws.path("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("i_ml,i_epsilon"));
}

#[test]
fn failures_exit_nonzero_without_partial_output() {
    let ws = Workspace::new();
    ws.ok(&["simulate", "--out", "ds"]);
    ws.ok(&["reconstruct", "ds", "--out", "run"]);

    // constant baseline curve: epsilon undefined
    let csv = fs::read_to_string(ws.path("run/loss.csv")).unwrap();
    let flat: String = csv
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("{},1,1\n", l.split(',').next().unwrap()) })
        .collect();
    fs::write(ws.path("run/loss.csv"), flat).unwrap();
    let out = ws.run(&["evaluate", "run", "run", "--out", "eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
    assert!(!ws.path("eval").exists());

    // truncated patterns
    let pat = ws.path("ds/patterns.bin");
    let bytes = fs::read(&pat).unwrap();
    fs::write(&pat, &bytes[..bytes.len() / 2]).unwrap();
    let out = ws.run(&["reconstruct", "ds", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!ws.path("bad").exists());

    // invalid configuration
    fs::write(ws.path("bad.json"), r#"{"sim": {"scan_step": 99}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ptyff"))
        .args(["--config"])
        .arg(ws.path("bad.json"))
        .args(["simulate", "--out"])
        .arg(ws.path("never"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("never").exists());

    // unwritable destination: parent is a regular file
    fs::write(ws.path("blocker"), b"x").unwrap();
    let out = ws.run(&["simulate", "--out", "blocker/ds"]);
    assert!(!out.status.success());

    let out = ws.run(&["--threads", "0", "simulate", "--out", "t0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn existing_output_is_replaced_atomically() {
    let ws = Workspace::new();
    ws.ok(&["simulate", "--seed", "1", "--out", "ds"]);
    fs::write(ws.path("ds/stray.txt"), b"old").unwrap();
    ws.ok(&["simulate", "--seed", "2", "--out", "ds"]);
    assert!(!ws.path("ds/stray.txt").exists());
    assert_eq!(manifest(&ws.path("ds"))["seeds"]["texture"], 2);
    let leftovers: Vec<String> = listing(ws.dir.path()).into_iter().filter(|n| n.contains("staging")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}
