//! End-to-end behaviour of the `hetfl` binary: exit codes, artifacts and
//! reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetfl::data::{load_dataset, synthetic, Partition};
use serde_json::Value;

fn hetfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetfl"))
        .args(args)
        .env_remove("HETFL_OUT")
        .env_remove("HETFL_THREADS")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn repo(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_close(a: &Value, b: &Value, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) if x.is_f64() || y.is_f64() => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-6, "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                assert_close(u, v, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            for (k, u) in x {
                assert_close(u, &y[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

/// Write `actual` to the fixture when blessing, then return the fixture.
fn golden(name: &str, actual: &str) -> String {
    let path = fixture(name);
    if std::env::var_os("HETFL_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    fs::read_to_string(&path).unwrap_or_default()
}

#[test]
fn app_scale_partition_is_disjoint_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let config = repo("configs/app1_partition.json");
    for out in [&a, &b] {
        let o = hetfl(&["partition", "--config", s(&config), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let partition = Partition::from_json(&text).unwrap();
    assert_eq!(partition.devices.len(), 300);
    assert_eq!(partition.public.len(), 100);
    assert_eq!(partition.alpha, Some(0.1));
    let data = synthetic::prototypes(3100, 10, [1, 8, 8], 0.3, 0).unwrap();
    partition.validate(&data, Some(100)).unwrap();

    let c = dir.path().join("c.json");
    let o = hetfl(&["partition", "--config", s(&config), "--out", s(&c), "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read_to_string(&c).unwrap(), text);
}

#[test]
fn partition_accepts_a_dataset_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let o = hetfl(&[
        "partition",
        "--config",
        s(&repo("configs/digits_moss.json")),
        "--dataset",
        s(&repo("data/digits")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p = Partition::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    p.validate(&load_dataset(repo("data/digits")).unwrap(), Some(100)).unwrap();
}

#[test]
fn schema_errors_name_the_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(fixture("toy_run.json")).unwrap()).unwrap();
    cfg["partition"]["samples_per_device"] = Value::String("ten".into());
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    for cmd in ["partition", "run"] {
        let out = dir.path().join("out");
        let o = hetfl(&[cmd, "--config", s(&path), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("partition.samples_per_device"), "{}", stderr(&o));
    }
    let o = hetfl(&["run", "--config", s(&fixture("toy_run.json")), "--out", s(dir.path()), "--ablation", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ablation"));
}

#[test]
fn missing_files_exit_4_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = hetfl(&["run", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nope.json"));

    let gone = dir.path().join("no_such_run");
    let o = hetfl(&["report", s(&gone), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("no_such_run"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(fixture("toy_run.json")).unwrap()).unwrap();
    cfg["hp"]["learning_rate"] = 1e30.into();
    let path = dir.path().join("hot.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = hetfl(&["run", "--config", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn zero_rounds_give_an_empty_log_and_null_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(fixture("toy_run.json")).unwrap()).unwrap();
    cfg["rounds"] = 0.into();
    let path = dir.path().join("t0.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = hetfl(&["run", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("rounds.jsonl")).unwrap(), "");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], Value::Null);
    assert_eq!(summary["rounds"], 0);
}

#[test]
fn ablation_flag_tags_the_summary_and_env_sets_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_hetfl"))
        .args(["run", "--config", s(&fixture("toy_run.json")), "--ablation=no_file"])
        .env("HETFL_OUT", &out)
        .env("HETFL_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["tag"], "moss-no-file");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["ablation"]["no_file"], true);
    for key in ["manifest", "partition", "rounds", "summary", "audit"] {
        let p = manifest["artifacts"][key].as_str().unwrap();
        assert!(Path::new(p).is_file(), "{key}: {p}");
    }
    assert!(manifest["finished_at"].as_u64().is_some());
}

#[test]
fn fixture_runs_match_frozen_summary_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let moss = dir.path().join("moss");
    let distill = dir.path().join("distillation");
    for (cfg, out) in [("toy_run.json", &moss), ("toy_distillation.json", &distill)] {
        let o = hetfl(&["run", "--config", s(&fixture(cfg)), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let summary = fs::read_to_string(moss.join("summary.json")).unwrap();
    let frozen = golden("golden_summary.json", &summary);
    assert_close(
        &serde_json::from_str(&summary).unwrap(),
        &serde_json::from_str(&frozen).unwrap(),
        "summary",
    );

    let report = dir.path().join("report");
    let o = hetfl(&["report", s(&moss), s(&distill), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run,method,tag,tiers,convergence_rounds,final_accuracy,mean_final_accuracy,cumulative_mb"
    );
    assert_eq!(lines.count(), 2);
    assert_eq!(csv, golden("golden_report.csv", &csv));
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(table.contains("logit-distillation"));
    let svg = fs::read_to_string(report.join("accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 4);

    // Reports read artifacts only: a second report is identical.
    let again = dir.path().join("again");
    assert!(hetfl(&["report", s(&moss), s(&distill), "--out", s(&again)]).status.success());
    assert_eq!(csv, fs::read_to_string(again.join("report.csv")).unwrap());
}
