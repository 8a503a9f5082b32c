mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use superpose::synth::{write_synthetic_transformer, TransformerSpec};
use superpose::Checkpoint;

fn superpose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superpose"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SUPERPOSE_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path, tasks: usize) {
    let spec = TransformerSpec { layers: 1, hidden: 8, ffn: 12, vocab: 10, tasks, ..TransformerSpec::default() };
    write_synthetic_transformer(dir, &spec).unwrap();
}

#[test]
fn merge_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let o = superpose(
        &[
            "merge",
            "--base",
            "base.safetensors",
            "--task",
            "task0.safetensors",
            "--task",
            "b=task1.safetensors",
            "--eta",
            "0.2",
            "--gamma",
            "0.8",
            "--out",
            "merged.safetensors",
            "--report",
            "report.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let merged = Checkpoint::open(dir.path().join("merged.safetensors")).unwrap();
    assert_eq!(merged.len(), Checkpoint::open(dir.path().join("base.safetensors")).unwrap().len());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["tasks"], serde_json::json!(["task0", "b"]));
    assert_eq!(report["config"]["gamma"], 0.8);
}

#[test]
fn eta_out_of_range_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 1);
    let o = superpose(
        &["merge", "--base", "base.safetensors", "--task", "task0.safetensors", "--eta", "1.5", "--out", "m.st"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("eta") && err.trim().lines().count() == 1, "{err}");
    assert!(!dir.path().join("m.st").exists());
}

#[test]
fn missing_tensor_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pre.st", vec![record("w", &[2, 2], vec![0.0; 4]), record("gone.bias", &[2], vec![0.0; 2])]);
    write(dir.path(), "t.st", vec![record("w", &[2, 2], vec![1.0; 4])]);
    let o = superpose(&["merge", "--base", "pre.st", "--task", "t.st", "--out", "m.st"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gone.bias"), "{}", stderr(&o));
}

#[test]
fn malformed_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.st"), b"\x05\0\0\0\0\0\0\0{").unwrap();
    let o = superpose(&["inspect", "bad.st"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.st"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(superpose(&["merge", "--frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(superpose(&["merge", "--task", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(superpose(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn inspect_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 1);
    let o = superpose(&["inspect", "base.safetensors"], dir.path());
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let header: Vec<&str> = out.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["name", "shape", "dtype", "role"]);
    let q = out.lines().find(|l| l.starts_with("layers.0.attn.q.weight")).unwrap();
    assert!(q.contains("[8, 8]") && q.contains("F32") && q.ends_with("linear"));
    assert!(out.lines().any(|l| l.starts_with("final_norm.weight") && l.ends_with("normalization")));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    std::fs::write(
        dir.path().join("run.toml"),
        r#"
base = "base.safetensors"
output = "from_file.safetensors"
report = "report.json"

[[task]]
id = "x"
path = "task0.safetensors"

[[task]]
id = "y"
path = "task1.safetensors"

[merge]
eta = 0.5
gamma = 0.7

[roles]
[[roles.rule]]
pattern = "embed_tokens.*"
role = "ignore"
"#,
    )
    .unwrap();
    let o = superpose(&["merge", "--config", "run.toml", "--gamma", "0.9", "--out", "flag.safetensors"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("flag.safetensors").exists());
    assert!(!dir.path().join("from_file.safetensors").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["eta"], 0.5);
    assert_eq!(report["config"]["gamma"], 0.9);
    assert!(report["layers"].as_array().unwrap().iter().all(|l| l["name"] != "embed_tokens.weight"));
    assert_eq!(
        read(&dir.path().join("flag.safetensors"), "embed_tokens.weight"),
        read(&dir.path().join("base.safetensors"), "embed_tokens.weight")
    );
}

#[test]
fn preserve_report_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let run = ["--base", "base.safetensors", "--task", "task0.safetensors", "--task", "task1.safetensors"];
    let mut args = vec!["preserve-report", "--methods", "stf,average,ta", "--json", "p.json", "--csv", "p.csv"];
    args.extend(run);
    let o = superpose(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut groups: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    groups.dedup();
    assert_eq!(groups, ["stf", "average", "ta"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);

    let mut args = vec!["ablate", "--target", "smallest", "--fraction", "0.5", "--json", "a.json", "--csv", "a.csv"];
    args.extend(run);
    let o = superpose(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 1);
    assert_eq!(json["rows"][0]["fraction"], 0.5);

    let mut args = vec!["preserve-report", "--methods", "stf,ties"];
    args.extend(run);
    assert_eq!(superpose(&args, dir.path()).status.code(), Some(1));
    let mut args = vec!["ablate", "--fraction", "1.0"];
    args.extend(run);
    assert_eq!(superpose(&args, dir.path()).status.code(), Some(1));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_superpose"))
        .args(["merge", "--base", "base.safetensors", "--task", "task0.safetensors", "--out", "m.st"])
        .current_dir(dir.path())
        .env("SUPERPOSE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("threads"));
}
