//! End-to-end checks of the command-line interface: descriptor handling,
//! output files, exit codes and the report aggregation round trip.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opqvi"))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn list_problems_names_everything() {
    let out = bin().arg("list-problems").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["mo63", "mo64", "qvi_worked", "boc"] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
}

#[test]
fn solve_writes_csv_and_reports_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let desc_path = dir.path().join("run.json");
    let csv_path = dir.path().join("out.csv");
    write(
        &desc_path,
        &format!(
            r#"{{"problem": "mo64", "lambdas": [0.001, 0.01], "output": "{}"}}"#,
            csv_path.display()
        ),
    );
    let out = bin().arg("solve").arg("--config").arg(&desc_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("mo64"));
    assert!(stdout.contains("converged"));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("problem,lambda"));
    assert_eq!(csv.lines().count(), 3); // header + two cells
    let first_cell: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let f_hat: f64 = first_cell[4].parse().unwrap();
    assert!((f_hat - 7.39).abs() < 0.05, "F at lambda = 0.001: {f_hat}");

    // aggregate the file back
    let out = bin().arg("report").arg(&csv_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("iterations < 100"));
    assert!(table.contains("sigma_gap < 0.05"));
}

#[test]
fn solve_flags_without_config() {
    let out = bin()
        .args(["solve", "--problem", "mo63", "--lambda", "1.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("-49.0"), "{stdout}");
}

#[test]
fn unknown_problem_exits_with_config_error() {
    let out = bin()
        .args(["solve", "--problem", "nope", "--lambda", "1.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_descriptor_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let desc_path = dir.path().join("bad.json");
    write(&desc_path, r#"{"problem": "mo63", "mystery": true}"#);
    let out = bin().arg("solve").arg("--config").arg(&desc_path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diagnose_solves_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    let desc_path = dir.path().join("run.json");
    let json_path = dir.path().join("reg.json");
    write(&desc_path, r#"{"problem": "mo64", "lambdas": [0.001]}"#);
    let out = bin()
        .arg("diagnose")
        .arg("--config")
        .arg(&desc_path)
        .arg("--tau-act")
        .arg("1e-3")
        .arg("--output")
        .arg(&json_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("cd-regular"), "{text}");
    assert!(text.contains("Holds"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(report["licq_upper"]["verdict"], "holds");
    assert_eq!(report["scc"], "holds");
}

#[test]
fn stability_subcommand_reports_value_function() {
    let dir = tempfile::tempdir().unwrap();
    let point_path = dir.path().join("point.json");
    write(&point_path, r#"{"x": [1.0, 2.0], "y": [1.5, 2.0]}"#);
    let out = bin()
        .args(["stability", "--problem", "qvi_worked", "--point"])
        .arg(&point_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    // phi = 1 + (2/3)*4 = 3.666...
    assert!(text.contains("3.666666"), "{text}");
    assert!(text.contains("qualification      Holds"), "{text}");
}

#[test]
fn output_dir_env_var_prefixes_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "solve",
            "--problem",
            "mo63",
            "--lambda",
            "1.0",
            "--output",
            "rows.csv",
        ])
        .env("OPQVI_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("rows.csv").exists());
}
