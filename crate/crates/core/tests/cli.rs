//! End-to-end runs of the `fbsde` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .env_remove("FBSDE_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_builtin_passes() {
    let o = fbsde(&["validate", "T0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("overall: pass"), "{out}");
}

#[test]
fn validate_reports_malformed_json_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    fs::write(&p, "{\"n\": 1,,}").unwrap();
    let o = fbsde(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte offset 8"), "{}", stderr(&o));
}

#[test]
fn over_budget_plan_is_refused_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = fbsde(&[
        "audit",
        "scaling",
        "T1",
        "--paths",
        "200000",
        "--steps",
        "20",
        "--deltas",
        "0.0001:0.1:4",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("1.600e7"), "{e}");
    assert!(!tmp.path().join("audit-scaling").exists());
}

#[test]
fn solve_writes_run_directory_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = fbsde(&[
        "solve", "T3", "--paths", "1000", "--steps", "5", "--out", out, "--label", "run",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("solve/run");
    for f in [
        "manifest.json",
        "policy.json",
        "diagnostics.json",
        "paths.csv",
        "iterations.csv",
        "verdict.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["model"]["reference"], "T3");
    assert_eq!(m["model"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["pass"], true);
    assert!(m["finished_at"].is_string());
    assert_eq!(m["config"]["solver"]["n_paths"], 1000);
    let v = json(&dir.join("verdict.json"));
    assert_eq!(v["command"], "solve");
    assert!(v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["pass"] == true));
}

#[test]
fn env_output_root_is_used_without_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(["audit", "drivers", "T1", "--paths", "2000", "--label", "d"])
        .env("FBSDE_OUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("audit-drivers/d/drivers.csv").exists());
}

#[test]
fn csv_outputs_identical_across_workers_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for (label, workers) in [("w1", "1"), ("w4", "4"), ("w1b", "1")] {
        let o = fbsde(&[
            "audit",
            "scaling",
            "T3",
            "--paths",
            "3000",
            "--steps",
            "5",
            "--deltas",
            "0.01:0.1:3",
            "--zeta",
            "1",
            "--workers",
            workers,
            "--out",
            out,
            "--label",
            label,
        ]);
        assert!(o.status.code().unwrap() <= 1, "{}", stderr(&o));
        let o = fbsde(&[
            "solve",
            "T3",
            "--paths",
            "3000",
            "--steps",
            "5",
            "--workers",
            workers,
            "--out",
            out,
            "--label",
            label,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in [
        "audit-scaling/{}/moments.csv",
        "audit-scaling/{}/fits.csv",
        "solve/{}/paths.csv",
        "solve/{}/iterations.csv",
    ] {
        let read = |l: &str| fs::read(tmp.path().join(f.replace("{}", l))).unwrap();
        let a = read("w1");
        assert_eq!(a, read("w4"), "{f} differs across workers");
        assert_eq!(a, read("w1b"), "{f} differs across reruns");
    }
    let svg = |l: &str| {
        fs::read(
            tmp.path()
                .join(format!("audit-scaling/{l}/scaling_int_z_p2.svg")),
        )
        .unwrap()
    };
    assert_eq!(svg("w1"), svg("w4"));
}

#[test]
fn epsilon_shift_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = fbsde(&[
        "audit",
        "stability",
        "T3-shift",
        "--eps",
        "0.1,0.01",
        "--zeta",
        "0.5",
        "--paths",
        "2000",
        "--out",
        out,
        "--label",
        "eps",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // y-dependent f: the exact shift is not applicable, which is a failed check
    let o = fbsde(&[
        "audit",
        "stability",
        "T3",
        "--eps",
        "0.1",
        "--paths",
        "1000",
        "--out",
        out,
        "--label",
        "na",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = fbsde(&["report", out]);
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(
        csv.contains("audit-stability/eps,audit stability,true"),
        "{csv}"
    );
    assert!(
        csv.contains("audit-stability/na,audit stability,false"),
        "{csv}"
    );
}

#[test]
fn invalid_moment_order_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fbsde(&[
        "audit",
        "lemma",
        "T1",
        "--p",
        "1.5",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("below 2"), "{}", stderr(&o));
}

#[test]
fn irreducible_coupling_is_refused_by_find_delta0() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = fbsde(&[
        "solve",
        "T3-neg",
        "--find-delta0",
        "--delta",
        "0.5",
        "--steps",
        "20",
        "--paths",
        "5000",
        "--max-iter",
        "12",
        "--out",
        out,
        "--label",
        "neg",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let ev = json(&tmp.path().join("solve/neg/delta0.json"));
    assert!(
        ev["error"]
            .as_str()
            .unwrap()
            .contains("no contracting window found"),
        "{ev}"
    );
    assert!(!ev["attempts"].as_array().unwrap().is_empty());
}
