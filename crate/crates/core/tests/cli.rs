use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nis::config::RunConfig;

fn nis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nis"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = RunConfig::preset("toy_retrieval").unwrap();
    c.task.examples = 3000;
    c.search.steps = 200;
    c.search.warmup_steps = Some(50);
    c.oracle.steps = Some(40);
    let p = dir.join("tiny.toml");
    fs::write(&p, c.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_exits_2_with_an_error_record() {
    let out = nis(&["search", "--config", "/no/such/run.toml", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with('{')).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(rec["error"], "io");
    assert_eq!(rec["path"], "/no/such/run.toml");
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(tiny_config(dir.path())).unwrap().replace("[search]", "[search]\nbatchsize = 3");
    let p = dir.path().join("bad.toml");
    fs::write(&p, text).unwrap();
    let out = nis(&["search", "--config", p.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn search_sweep_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("run1");
    let run_s = run.to_str().unwrap();

    let out = nis(&["search", "--config", &config, "--out", run_s, "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.resolved.toml", "dataset.bin", "metrics.jsonl", "search_result.json", "architecture.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join(".lock").exists());
    let resolved = RunConfig::from_toml(&fs::read_to_string(run.join("config.resolved.toml")).unwrap()).unwrap();
    assert_eq!(resolved.seed, 3);
    assert_eq!(resolved.search.warmup_steps, Some(50));
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count();
    assert!(lines >= 200);

    // Identical inputs overwrite identically.
    let first = fs::read(run.join("search_result.json")).unwrap();
    assert!(nis(&["search", "--config", &config, "--out", run_s, "--seed", "3"]).status.success());
    assert_eq!(first, fs::read(run.join("search_result.json")).unwrap());

    assert!(nis(&["oracle-sweep", "--config", &config, "--out", run_s, "--seed", "3"]).status.success());
    assert!(run.join("oracle_sweep_table.csv").exists());
    assert!(nis(&["evaluate", "--config", &config, "--out", run_s, "--seed", "3"]).status.success());
    assert!(run.join("evaluation.json").exists());

    let rep_dir = dir.path().join("report");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = nis(&["report", "--out", rep_dir.to_str().unwrap(), run_s, empty.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(rep_dir.join("report.md")).unwrap();
    for col in ["Cost", "Recall@1", "Recall@5"] {
        assert!(md.contains(col));
    }
    assert!(md.contains("NIS-SE (run1)"));
    assert!(md.contains("converged (run1)"));
    assert!(md.contains("Incomplete runs"));
    let series = fs::read_to_string(rep_dir.join("report_series.csv")).unwrap();
    assert!(series.starts_with("run,step,phase"));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(nis(&["gen-data", "--config", &config, "--out", a.to_str().unwrap()]).status.success());
    assert!(nis(&["gen-data", "--config", &config, "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(a.join("dataset.bin")).unwrap(), fs::read(b.join("dataset.bin")).unwrap());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("busy");
    fs::create_dir(&run).unwrap();
    fs::write(run.join(".lock"), "1").unwrap();
    let out = nis(&["gen-data", "--config", &config, "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
