//! End-to-end checks of the `growfrag` binary: exit codes, error reporting,
//! artifact layout, and bitwise-reproducible output.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_growfrag"));
    cmd.env_remove("GROWFRAG_THREADS");
    cmd
}

fn write_scenario(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    fs::write(&path, text).unwrap();
    path
}

const QUICK_BUMP: &str = r#"{
    "coefficients": {
        "growth": {"kind": "constant", "value": 1.0},
        "division": {"kind": "constant", "value": 1.0},
        "kernel": {"kind": "uniform"}
    },
    "grid": {"m": 80, "x_max": 10.0},
    "initial": {
        "density": {"kind": "bump", "center": 1.5, "width": 0.5, "mass": 1.0}
    },
    "solver": {"t_end": 0.5, "output_every": 0.1},
    "entropy": [{"family": "pseudo_huber", "center": "auto", "delta": 0.1}]
}"#;

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn good_scenario_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), QUICK_BUMP);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["entropy", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("validate: pass"), "stdout: {text}");
    assert!(text.contains("eigen: pass"), "stdout: {text}");
    assert!(text.contains("simulate: pass"), "stdout: {text}");
    assert!(text.contains("entropy: pass"), "stdout: {text}");
    for artifact in [
        "validation.json",
        "eigen.json",
        "eigen.csv",
        "trajectory.json",
        "diagnostics.csv",
        "entropy_pseudo_huber.csv",
        "summary.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    assert!(out_dir.join("snapshots").join("snap_0000.csv").exists());
}

#[test]
fn invalid_scenario_exits_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = QUICK_BUMP.replace("\"t_end\"", "\"t_endd\"");
    let scenario = write_scenario(dir.path(), &bad);
    let out = bin()
        .args(["validate", "--scenario"])
        .arg(&scenario)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("solver"), "stderr: {err}");
    assert!(err.contains("t_endd"), "stderr: {err}");
}

#[test]
fn missing_scenario_file_exits_two() {
    let out = bin()
        .args(["validate", "--scenario", "/nonexistent/scenario.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_stage_contract_exits_one_and_still_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let text = QUICK_BUMP
        .replace("\"center\": 1.5", "\"center\": 8.0")
        .replace(
            "\"t_end\": 0.5, \"output_every\": 0.1",
            "\"t_end\": 2.0, \"output_every\": 0.1, \"boundary_mass_limit\": 0.0",
        );
    let scenario = write_scenario(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["entropy", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("simulate: FAIL"), "stdout: {text}");
    assert!(text.contains("entropy: skipped"), "stdout: {text}");
    assert!(out_dir.join("summary.json").exists());
}

#[test]
fn invalid_thread_count_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), QUICK_BUMP);
    let out = bin()
        .args(["validate", "--scenario"])
        .arg(&scenario)
        .env("GROWFRAG_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("GROWFRAG_THREADS"));
}

/// Collect every file under `dir` as (relative path, bytes).
fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap();
                out.push((
                    rel.to_string_lossy().into_owned(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn reruns_are_bitwise_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), QUICK_BUMP);
    let mut runs = Vec::new();
    for (label, threads) in [("default", None), ("one_a", Some(1)), ("one_b", Some(1))] {
        let out_dir = dir.path().join(label);
        let mut cmd = bin();
        cmd.args(["simulate", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(&out_dir);
        if threads.is_some() {
            cmd.arg("--single-thread");
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        runs.push(dir_contents(&out_dir));
    }
    let names: Vec<&String> = runs[0].iter().map(|(n, _)| n).collect();
    assert!(names.contains(&&"eigen.csv".to_string()));
    assert!(names.contains(&&"diagnostics.csv".to_string()));
    for other in &runs[1..] {
        assert_eq!(runs[0].len(), other.len());
        for (a, b) in runs[0].iter().zip(other) {
            assert_eq!(a.0, b.0, "file sets differ");
            assert_eq!(a.1, b.1, "bytes differ in {}", a.0);
        }
    }
}
