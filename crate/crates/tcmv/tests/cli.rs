//! End-to-end checks of the `tcmv` binary: exit codes, file outputs,
//! manifests, and lossless round-trips.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tcmv");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const ZERO_DRIFT: &str = r#"{
    "kind": "explicit-tree", "horizon": 1,
    "nodes": [
        {"level": 0, "price": 1.0, "children": [{"id": 1, "prob": 0.5}, {"id": 2, "prob": 0.5}]},
        {"level": 1, "price": 2.0},
        {"level": 1, "price": 0.0}
    ]
}"#;

const DETERMINISTIC: &str = r#"{
    "kind": "explicit-tree", "horizon": 2,
    "nodes": [
        {"level": 0, "price": 1.0, "children": [{"id": 1, "prob": 1.0}]},
        {"level": 1, "price": 2.0, "children": [{"id": 2, "prob": 1.0}]},
        {"level": 2, "price": 3.0}
    ]
}"#;

const BINOMIAL: &str = r#"{
    "kind": "binomial", "horizon": 8, "recombining": true,
    "spec": {"kind": "geometric-brownian", "mu": 0.1, "sigma": 0.2, "s0": 100.0, "t_real": 1.0}
}"#;

#[test]
fn solve_zero_drift_writes_zero_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tree.json", ZERO_DRIFT);
    let out = dir.path().join("out.csv");
    let res = run(&[
        "solve",
        "--config",
        &cfg,
        "--kind",
        "lmve",
        "--gamma",
        "2",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "node_id,level,price,theta,Z,U");
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[3].parse::<f64>().unwrap(), 0.0); // theta
        assert_eq!(cells[5].parse::<f64>().unwrap(), 0.0); // U (x = 0)
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out.csv.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["command"].as_str().unwrap().contains("solve"));
}

#[test]
fn solve_sc_violation_exits_one_with_node_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "det.json", DETERMINISTIC);
    let res = run(&["solve", "--config", &cfg, "--kind", "lmve"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("structure condition"), "{err}");
    assert!(err.contains('0') || err.contains('1'), "{err}");
}

#[test]
fn diagnose_sc_violation_warns_but_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "det.json", DETERMINISTIC);
    let res = run(&["diagnose", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    let stdout = String::from_utf8_lossy(&res.stdout);
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["sc_holds"], false);
}

#[test]
fn unknown_subcommand_exits_64() {
    let res = run(&["frobnicate"]);
    assert_eq!(res.status.code(), Some(64));
}

#[test]
fn unknown_config_key_exits_one_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        &BINOMIAL.replace("\"horizon\": 8,", "\"horizon\": 8, \"gamma_\": 2.0,"),
    );
    let res = run(&["solve", "--config", &cfg, "--kind", "mmve"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gamma_"));
}

#[test]
fn solve_csv_reread_reproduces_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bin.json", BINOMIAL);
    let out = dir.path().join("lmve.csv");
    let res = run(&[
        "solve",
        "--config",
        &cfg,
        "--kind",
        "lmve",
        "--gamma",
        "2",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    // recompute in-process and compare the re-parsed decimals bit-for-bit
    let tree = tcmv::config::build_from_config(&tcmv::config::parse_config(BINOMIAL).unwrap())
        .unwrap();
    let result = tcmv::solvers::solve_lmve_recursion(&tree, 2.0, 0.0).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    for (row, line) in text.lines().skip(1).enumerate() {
        let theta: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(theta.to_bits(), result.strategy.0[row].to_bits());
    }
}

#[test]
fn decompose_writes_k0_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bin.json", BINOMIAL);
    let out = dir.path().join("fs.csv");
    let res = run(&["decompose", "--config", &cfg, "--output", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# K0_hat = "));
    assert!(text.lines().nth(1).unwrap().starts_with("node_id,level,xi_hat"));
}

#[test]
fn verify_passes_on_binomial_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bin.json", BINOMIAL);
    let res = run(&["verify", "--config", &cfg, "--gamma", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["all_pass"], true);
}

#[test]
fn converge_writes_table_and_plot_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "conv.json",
        r#"{"spec": {"kind": "geometric-brownian", "mu": 0.1, "sigma": 0.2, "s0": 1.0, "t_real": 1.0},
            "n_list": [4, 8, 16], "gamma": 2.0}"#,
    );
    let out = dir.path().join("conv.csv");
    let plot = dir.path().join("plot.csv");
    let res = run(&[
        "converge",
        "--config",
        &cfg,
        "--output",
        out.to_str().unwrap(),
        "--plot-csv",
        plot.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().next().unwrap().starts_with("n,lambda_error"));
    assert!(std::fs::read_to_string(&plot).unwrap().starts_with("log10_n"));
}

#[test]
fn example_bm_reports_moments() {
    let res = run(&[
        "example-bm",
        "--paths",
        "5000",
        "--dt",
        "0.01",
        "--seed",
        "3",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let est = report["moments"]["sigma"]["estimate"].as_f64().unwrap();
    assert!((est - 2.0 * std::f64::consts::LN_2).abs() < 0.1);
    assert!(report["identities"]["exact_dev_ew"].as_f64().unwrap() < 1e-15);
}

#[test]
fn selftest_passes() {
    let res = run(&["selftest"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("selftest: all passed"));
}

#[test]
fn precommit_target_mean_below_capital_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bin.json", BINOMIAL);
    let res = run(&[
        "solve",
        "--config",
        &cfg,
        "--kind",
        "precommit",
        "--x",
        "5",
        "--target-mean",
        "4",
    ]);
    assert_eq!(res.status.code(), Some(1));
}
