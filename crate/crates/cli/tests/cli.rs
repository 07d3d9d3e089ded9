//! End-to-end runs of the `twonoise` binary: config validation, output
//! files, exit codes, and the determinism contract (bit-exact reruns from
//! the manifest at a fixed worker count).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_twonoise")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("twonoise-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

const SMALL_ORACLE: &str = r#"{
  "experiment": "oracle-validate",
  "model": { "kind": "example1d" },
  "numerics": { "dt": 0.002, "t_hist": 4.0, "horizon": 1.0, "n_paths": 4000 },
  "seeds": { "master": 1, "driving": 100, "wiener": 200 }
}"#;

#[test]
fn validation_names_the_offending_field() {
    let dir = scratch("validate");
    let cfg = write_config(
        &dir,
        r#"{
          "experiment": "oracle-validate",
          "model": { "kind": "example1d" },
          "numerics": { "dt": 0.3, "t_hist": 4.2, "horizon": 1.0, "n_paths": 100 },
          "seeds": { "master": 1, "driving": 2, "wiener": 3 }
        }"#,
    );
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("numerics.dt"), "stderr: {err}");
}

#[test]
fn distinct_seed_domains_are_enforced() {
    let dir = scratch("seeds");
    let cfg = write_config(
        &dir,
        r#"{
          "experiment": "oracle-validate",
          "model": { "kind": "example1d" },
          "numerics": { "dt": 0.01, "t_hist": 4.0, "horizon": 1.0, "n_paths": 100 },
          "seeds": { "master": 1, "driving": 7, "wiener": 7 }
        }"#,
    );
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seeds"), "stderr: {err}");
}

#[test]
fn small_run_passes_and_writes_outputs() {
    let dir = scratch("run");
    let cfg = write_config(&dir, SMALL_ORACLE);
    let out_dir = dir.join("out");
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["results.csv", "report.json", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
    assert_eq!(report["tuples_passed"], "20/20");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["config"]["seeds"]["master"].is_u64());
}

#[test]
fn reruns_from_the_manifest_are_bit_exact() {
    let dir = scratch("determinism");
    let cfg = write_config(&dir, SMALL_ORACLE);
    let out1 = dir.join("a");
    let out2 = dir.join("b");
    let status1 = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert_eq!(status1.status.code(), Some(0));
    // rerun from the manifest, same worker count
    let manifest = out1.join("manifest.json");
    let status2 = run(&[
        "run",
        manifest.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert_eq!(status2.status.code(), Some(0));
    let a = std::fs::read(out1.join("results.csv")).unwrap();
    let b = std::fs::read(out2.join("results.csv")).unwrap();
    assert_eq!(a, b, "results.csv must be bit-identical");

    // and across a different worker count
    let out3 = dir.join("c");
    let status3 = run(&[
        "run",
        manifest.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert_eq!(status3.status.code(), Some(0));
    let c = std::fs::read(out3.join("results.csv")).unwrap();
    assert_eq!(a, c, "worker count must not leak into results");
}

#[test]
fn seed_override_changes_the_draws() {
    let dir = scratch("override");
    let cfg = write_config(&dir, SMALL_ORACLE);
    let out1 = dir.join("a");
    let out2 = dir.join("b");
    assert_eq!(
        run(&["run", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        run(&[
            "run",
            cfg.to_str().unwrap(),
            "--out",
            out2.to_str().unwrap(),
            "--seed-override",
            "999",
        ])
        .status
        .code(),
        Some(0)
    );
    let a = std::fs::read(out1.join("results.csv")).unwrap();
    let b = std::fs::read(out2.join("results.csv")).unwrap();
    assert_ne!(a, b, "master seed must steer the tuple draws");
}

#[test]
fn property_failure_exits_with_two() {
    // a pullback too shallow to converge at the configured tolerance
    let dir = scratch("exit2");
    let cfg = write_config(
        &dir,
        r#"{
          "experiment": "evo-pullback",
          "model": { "kind": "example1d" },
          "numerics": {
            "dt": 0.01, "t_hist": 12.0, "n_paths": 256, "rho1": 2.0,
            "s_list": [-1.0, -2.0], "t_grid": [0.0]
          },
          "seeds": { "master": 3, "driving": 4, "wiener": 5 }
        }"#,
    );
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn frozen_driving_realization_is_reused() {
    let dir = scratch("freeze");
    let base = r#"{
      "experiment": "evo-pullback",
      "model": { "kind": "example1d" },
      "numerics": {
        "dt": 0.01, "t_hist": 14.0, "n_paths": 256, "rho1": 2.0,
        "s_list": [-4.0, -8.0, -12.0], "t_grid": [0.0]
      },
      "seeds": { "master": 3, "driving": @SEED@, "wiener": 5 }@EXTRA@
    }"#;
    let cfg1 = write_config(&dir, &base.replace("@SEED@", "4").replace("@EXTRA@", ""));
    let out1 = dir.join("a");
    assert_eq!(
        run(&["run", cfg1.to_str().unwrap(), "--out", out1.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let frozen = out1.join("driving.json");
    assert!(frozen.exists());

    // different driving seed, but the frozen file wins
    let cfg2 = dir.join("config2.json");
    std::fs::write(
        &cfg2,
        base.replace("@SEED@", "999999").replace(
            "@EXTRA@",
            &format!(",\n      \"driving_path\": {:?}", frozen.to_str().unwrap()),
        ),
    )
    .unwrap();
    let out2 = dir.join("b");
    let out = run(&["run", cfg2.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = std::fs::read(out1.join("results.csv")).unwrap();
    let b = std::fs::read(out2.join("results.csv")).unwrap();
    assert_eq!(a, b, "the frozen realization must drive both runs");
    assert!(out2.join("ensemble_t0.csv").exists());
}

#[test]
fn mixing_run_reports_a_positive_rate() {
    let dir = scratch("mixing");
    let cfg = write_config(
        &dir,
        r#"{
          "experiment": "mixing",
          "model": { "kind": "example1d" },
          "numerics": {
            "dt": 0.01, "t_hist": 6.0, "n_paths": 64, "n_secondary": 4,
            "checkpoints": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0],
            "delta_couple": 0.1
          },
          "seeds": { "master": 88, "driving": 300, "wiener": 301 }
        }"#,
    );
    let out_dir = dir.join("o");
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let rate = report["rate_fit"]["rate"].as_f64().unwrap();
    assert!(rate > 0.8 && rate < 1.2, "rate {rate}");
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("t,obs_diff,obs_se,uncoupled_fraction"));
    let curve = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("t,value,stderr\n"));
}
