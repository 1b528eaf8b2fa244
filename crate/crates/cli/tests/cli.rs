use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddspc::conic::{Cone, ConicProgram, SparseMatrix};
use ddspc::experiment::ExperimentConfig;
use nalgebra::DMatrix;
use serde_json::Value;

fn ddspc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddspc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DDSPC_THREADS")
        .output()
        .expect("binary runs")
}

fn committed_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/aircraft.json")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn committed_config_is_the_default() {
    let text = std::fs::read_to_string(committed_config()).unwrap();
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = ddspc(&["run", "--seed", "7", "--steps", "4"], d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = std::fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ta).lines().count(), 5);
}

#[test]
fn montecarlo_writes_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = committed_config();
    let o = ddspc(
        &[
            "montecarlo",
            "--config",
            config.to_str().unwrap(),
            "--runs",
            "3",
            "--steps",
            "5",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["runs"], 3);
    assert!(summary["violation_rate"][0].as_f64().unwrap() <= 0.1);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "montecarlo");
    let cfg_text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert_eq!(manifest["config_sha256"], ddspc::lti::fingerprint(cfg_text.as_bytes()));
    let resolved = ExperimentConfig::from_json(&cfg_text).unwrap();
    assert_eq!((resolved.simulation.runs, resolved.simulation.steps), (3, 5));
    for f in ["traces.csv", "histograms.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn pinned_mu_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddspc(
        &["run", "--steps", "3", "--mu-mode", "one", "--causality", "literal"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = csv.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = head.iter().position(|h| *h == "mu").unwrap();
    for l in lines {
        let mu: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        assert!((mu - 1.0).abs() < 1e-9);
    }
}

#[test]
fn lemma_verification_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddspc(&["verify-lemma", "--windows", "30"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("lemma.csv")).unwrap();
    let residuals: Vec<f64> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(residuals.len(), 30);
    assert!(residuals.iter().all(|r| *r < 1e-8));
}

#[test]
fn fixture_is_solved_by_both_backends() {
    let dir = tempfile::tempdir().unwrap();
    let prog = ConicProgram {
        p: SparseMatrix::upper_from_dense(&DMatrix::from_element(1, 1, 1.0)),
        q: vec![-1.0],
        a: SparseMatrix::from_dense(&DMatrix::from_element(1, 1, 1.0)),
        b: vec![0.5],
        cones: vec![Cone::NonNeg(1)],
        constant: 0.0,
    };
    let path = dir.path().join("fixture.json");
    std::fs::write(&path, prog.to_json().unwrap()).unwrap();
    for solver in ["admm", "ipm"] {
        let out = dir.path().join(solver);
        let o = ddspc(&["solve-fixture", path.to_str().unwrap(), "--solver", solver], &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let sol = json(&out.join("solution.json"));
        assert_eq!(sol["status"], "optimal");
        assert!((sol["x"][0].as_f64().unwrap() - 0.5).abs() < 1e-6);
    }
}

#[test]
fn invalid_config_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.length = 3;
    cfg.ocp.eps_y = 2.0;
    cfg.simulation.runs = 0;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    let o = ddspc(&["run", "--config", path.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["details"].as_array().unwrap().len(), 3);
}

#[test]
fn malformed_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ddspc"))
        .args(["collect", "--out"])
        .arg(dir.path())
        .env("DDSPC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}
