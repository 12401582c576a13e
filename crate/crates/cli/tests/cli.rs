use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn can(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_can"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_matrix(p: &Path, rows: &[&[f64]]) {
    std::fs::write(p, serde_json::to_string(rows).unwrap()).unwrap();
}

#[test]
fn generated_local_instance_is_learned() {
    let dir = TempDir::new().unwrap();
    let inst = path(&dir, "local.json");
    let out = can(&[
        "gen-local",
        "--ell",
        "6",
        "--h",
        "3",
        "--seed",
        "4",
        "--out",
        s(&inst),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = can(&["learn-edge", "--instance", s(&inst), "--seed", "1"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = stdout_json(&out);
    assert_eq!(doc["converged"], true);
    assert!(doc["kl"].as_f64().unwrap() <= 1e-3);
    assert_eq!(doc["f1"].as_f64().unwrap(), 1.0);
    assert_eq!(doc["weights"].as_array().unwrap().len(), 6);
}

#[test]
fn interlacing_check_and_solver_failure_exit_code() {
    let dir = TempDir::new().unwrap();
    let (l, h, bad, b) = (
        path(&dir, "l.json"),
        path(&dir, "h.json"),
        path(&dir, "bad.json"),
        path(&dir, "b.json"),
    );
    write_matrix(&l, &[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
    write_matrix(&h, &[&[2.5, 0.0], &[0.0, 1.5]]);
    write_matrix(&bad, &[&[5.0, 0.0], &[0.0, 1.5]]);
    write_matrix(&b, &[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);

    let ok = stdout_json(&can(&["check", "--sigma-l", s(&l), "--sigma-h", s(&h)]));
    assert_eq!(ok["interlacing"], true);
    assert_eq!(ok["spectrum_l"].as_array().unwrap().len(), 3);
    let no = stdout_json(&can(&["check", "--sigma-l", s(&l), "--sigma-h", s(&bad)]));
    assert_eq!(no["interlacing"], false);

    let out = can(&[
        "learn-edge",
        "--sigma-l",
        s(&l),
        "--sigma-h",
        s(&bad),
        "--structure",
        s(&b),
        "--ntrials",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["converged"], false);
}

#[test]
fn malformed_input_reports_path_and_exits_one() {
    let dir = TempDir::new().unwrap();
    let l = path(&dir, "l.json");
    std::fs::write(&l, "[[1.0, 0.0], [0.0]]").unwrap();
    let out = can(&["check", "--sigma-l", s(&l), "--sigma-h", s(&l)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[1]"));

    let c = path(&dir, "can.json");
    std::fs::write(&c, r#"{"nodes": [{"id": 1, "dim": "two"}], "edges": []}"#).unwrap();
    let out = can(&["invariants", "--can", s(&c)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes[0].dim"));
}

#[test]
fn generated_can_feeds_analysis_commands() {
    let dir = TempDir::new().unwrap();
    let inst = path(&dir, "can.json");
    let out = can(&[
        "gen-can",
        "--topology",
        "tree",
        "--nodes",
        "4",
        "--dim-lo",
        "2",
        "--dim-hi",
        "6",
        "--seed",
        "3",
        "--out",
        s(&inst),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let inv = stdout_json(&can(&["invariants", "--can", s(&inst)]));
    assert_eq!(inv["dims"].as_array().unwrap().len(), 4);
    assert_eq!(inv["consistency"]["consistent"], true);
    let total: u64 = inv["dims"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_u64().unwrap())
        .sum();
    assert_eq!(inv["laplacian"].as_array().unwrap().len() as u64, total);

    let sm = stdout_json(&can(&["smoothness", "--can", s(&inst)]));
    assert!(sm["total"].as_f64().unwrap() <= 1e-8);

    let out = can(&["diffuse", "--can", s(&inst), "--steps", "3"]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());

    let out = can(&[
        "learn-can",
        "--instance",
        s(&inst),
        "--ntrials",
        "10",
        "--seed",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = stdout_json(&out);
    assert_eq!(doc["fpr"].as_f64().unwrap(), 0.0);
    assert!(doc["tpr"].as_f64().unwrap() > 0.0);
}

#[test]
fn batch_generation_needs_directory() {
    let out = can(&["gen-can", "--nodes", "3", "--dim-hi", "5", "--count", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let out = can(&[
        "gen-local",
        "--ell",
        "4",
        "--h",
        "2",
        "--count",
        "3",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn benchmark_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let (csv, summary) = (
            path(&dir, &format!("{name}.csv")),
            path(&dir, &format!("{name}.json")),
        );
        let out = can(&[
            "bench-local",
            "--pairs",
            "5:2,4:3",
            "--instances",
            "2",
            "--ntrials",
            "3",
            "--seed",
            "8",
            "--out",
            s(&csv),
            "--summary",
            s(&summary),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (std::fs::read(csv).unwrap(), std::fs::read(summary).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&a.0).starts_with("instance_id,metric,value"));
}
