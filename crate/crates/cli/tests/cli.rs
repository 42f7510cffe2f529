//! End-to-end checks of the command-line interface via the built binary.

use std::fs;
use std::path::Path;
use std::process::Command;

use envmix::baselines::{fit_method, Method, TwoStageConfig};
use envmix::icc::IccConfig;
use envmix::simgen::{generate_scenario, ScenarioConfig};

fn envmix_bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_envmix"));
    // Pin the manifest timestamp so reruns are byte-identical.
    cmd.env("ENVMIX_TIMESTAMP", "2000-01-01T00:00:00Z");
    cmd
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn simulate_writes_expected_files_and_group_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let status = envmix_bin()
        .args([
            "simulate", "--m", "2", "--n", "50", "--r", "4", "--p", "3", "--seed", "7", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["X.csv", "Y.csv", "labels.csv", "truth.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let labels = fs::read_to_string(out.join("labels.csv")).unwrap();
    let values: Vec<usize> = labels
        .lines()
        .skip(1)
        .map(|l| l.trim().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 50);
    assert_eq!(values.iter().filter(|&&v| v == 1).count(), 20);
    assert_eq!(values.iter().filter(|&&v| v == 2).count(), 30);
}

#[test]
fn simulate_is_byte_identical_under_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let run = || {
        let status = envmix_bin()
            .args(["simulate", "--m", "2", "--n", "40", "--r", "3", "--p", "2", "--seed", "9"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run();
    let names = ["X.csv", "Y.csv", "labels.csv", "truth.json"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| read(&out.join(n))).collect();
    fs::remove_dir_all(&out).unwrap();
    run();
    for (name, before) in names.iter().zip(&first) {
        assert_eq!(
            &read(&out.join(name)),
            before,
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn fit_on_written_files_matches_in_memory_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let status = envmix_bin()
        .args([
            "simulate", "--m", "2", "--n", "120", "--r", "4", "--p", "3", "--seed", "21", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let fit_path = dir.path().join("fit.json");
    let status = envmix_bin()
        .args(["fit", "--m", "2", "--u", "1", "--seed", "5"])
        .arg("--x")
        .arg(out.join("X.csv"))
        .arg("--y")
        .arg(out.join("Y.csv"))
        .arg("--out")
        .arg(&fit_path)
        .status()
        .unwrap();
    assert!(status.success());
    let fit_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fit_path).unwrap()).unwrap();

    // Same scenario and seed fitted in memory.
    let mut cfg = ScenarioConfig::new(2, 120, 21);
    cfg.r = 4;
    cfg.p = 3;
    let sim = generate_scenario(&cfg).unwrap();
    let fit = fit_method(
        &sim.data,
        Method::Icc,
        2,
        1,
        &IccConfig::with_seed(5),
        &TwoStageConfig::default(),
    )
    .unwrap();
    let mut theta = fit.theta.clone();
    theta.canonicalize();

    let beta_json = fit_json["theta"]["beta"].as_array().unwrap();
    for k in 0..2 {
        let beta = theta.beta(k);
        let rows = beta_json[k].as_array().unwrap();
        for i in 0..4 {
            let cols = rows[i].as_array().unwrap();
            for j in 0..3 {
                let v = cols[j].as_f64().unwrap();
                assert!(
                    (v - beta[(i, j)]).abs() <= 1e-12,
                    "beta[{k}][{i},{j}] differs: {v} vs {}",
                    beta[(i, j)]
                );
            }
        }
    }
}

#[test]
fn select_singleton_grid_reports_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    envmix_bin()
        .args([
            "simulate", "--m", "2", "--n", "90", "--r", "4", "--p", "3", "--seed", "2", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    let sel_path = dir.path().join("selection.json");
    let status = envmix_bin()
        .args(["select", "--m-grid", "2", "--u-grid", "1", "--seed", "4"])
        .arg("--x")
        .arg(out.join("X.csv"))
        .arg("--y")
        .arg(out.join("Y.csv"))
        .arg("--out")
        .arg(&sel_path)
        .status()
        .unwrap();
    assert!(status.success());
    let sel: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&sel_path).unwrap()).unwrap();
    assert_eq!(sel["best"][0], 2);
    assert_eq!(sel["best"][1], 1);
    assert_eq!(sel["grid"].as_array().unwrap().len(), 1);
    assert!(sel["manifest"]["options"]["seed"].is_number());
}

#[test]
fn exit_codes_distinguish_usage_data_and_shape_errors() {
    // Unknown flag: usage error (2).
    let status = envmix_bin().args(["fit", "--nope"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing input file: data error (3).
    let dir = tempfile::tempdir().unwrap();
    let status = envmix_bin()
        .args(["fit", "--m", "2", "--u", "1"])
        .arg("--x")
        .arg(dir.path().join("missing.csv"))
        .arg("--y")
        .arg(dir.path().join("missing_too.csv"))
        .arg("--out")
        .arg(dir.path().join("fit.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // Malformed CSV: data error (3) with a located message.
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x1,x2\n1.0,oops\n").unwrap();
    let y = dir.path().join("y.csv");
    fs::write(&y, "y1\n1.0\n").unwrap();
    let output = envmix_bin()
        .args(["fit", "--m", "1", "--u", "1"])
        .arg("--x")
        .arg(&bad)
        .arg("--y")
        .arg(&y)
        .arg("--out")
        .arg(dir.path().join("fit.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let message = String::from_utf8_lossy(&output.stderr);
    assert!(message.contains("row 2"), "message lacks location: {message}");

    // Dimension violation (u > r): data error (3).
    let x = dir.path().join("x.csv");
    fs::write(&x, "x1\n1.0\n2.0\n3.0\n4.0\n").unwrap();
    let y2 = dir.path().join("y2.csv");
    fs::write(&y2, "y1\n0.1\n0.4\n0.2\n0.8\n").unwrap();
    let status = envmix_bin()
        .args(["fit", "--m", "1", "--u", "3"])
        .arg("--x")
        .arg(&x)
        .arg("--y")
        .arg(&y2)
        .arg("--out")
        .arg(dir.path().join("fit.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn evaluate_without_labels_omits_cluster_score() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    envmix_bin()
        .args([
            "simulate", "--m", "2", "--n", "80", "--r", "3", "--p", "2", "--seed", "3", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    let eval_path = dir.path().join("eval.json");
    let status = envmix_bin()
        .args([
            "evaluate", "--m", "2", "--u", "1", "--seed", "6", "--folds", "3", "--bootstrap", "0",
        ])
        .arg("--x")
        .arg(out.join("X.csv"))
        .arg("--y")
        .arg(out.join("Y.csv"))
        .arg("--out")
        .arg(&eval_path)
        .status()
        .unwrap();
    assert!(status.success());
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_path).unwrap()).unwrap();
    assert!(eval["cluster_score"].is_null());
    assert!(eval["prediction"]["mean_error"].is_number());
    assert!(eval["bootstrap"].is_null());
}
