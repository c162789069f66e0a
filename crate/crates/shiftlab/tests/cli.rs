//! End-to-end checks of the `shiftlab` binary: exit codes, diagnostics, and
//! the on-disk artifacts each command leaves behind.

use shiftlab::adapt::evaluate;
use shiftlab::datagen::{sample_balanced, toy_spec};
use shiftlab::harness::load_model;
use shiftlab::nn::BnMode;
use shiftlab::rng::derive_seed;
use shiftlab::theory::ToyParams;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"{
  "seed": 3,
  "benchmark": {"kind": "toy4", "d": 1.0, "beta": 2.0, "sigma": 0.4, "p": 0.25},
  "model": {"hidden": [8]},
  "pretrain": {"epochs": 6, "batch_size": 32, "lr": 0.001, "min_accuracy": 0.0, "per_class": 60},
  "refiner": {"epochs": 2, "batch_size": 16, "hidden": 8, "per_class": 60},
  "stream": {"shift": {"kind": "long_tail", "rho": 10.0}, "batch_size": 16, "per_class": 30}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftlab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = run(&[flag]);
        assert!(out.status.success(), "{flag} exited {:?}", out.status.code());
    }
}

#[test]
fn usage_errors_exit_one_with_a_diagnostic() {
    for args in [vec!["frobnicate"], vec!["pretrain", "--no-such-flag"]] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?} exit code");
        assert!(!out.stderr.is_empty(), "{args:?} printed no diagnostic");
    }
}

#[test]
fn missing_config_file_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        "/no/such/config.json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "config errors are usage errors");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/config.json"), "stderr should name the path: {err}");
}

#[test]
fn malformed_config_is_rejected_with_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "pretrain": {"epochz": 3}}"#).unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz"), "stderr should name the unknown field: {err}");
}

#[test]
fn adapt_before_pretrain_exits_one_and_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(&[
        "adapt",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain"), "stderr should point at the pretrain step: {err}");
}

#[test]
fn pretrain_writes_artifacts_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut models = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&out.stderr));
        for name in ["model.json", "loss_curve.csv", "summary.json", "summary.txt"] {
            assert!(out_dir.join(name).exists(), "{name} missing after pretrain");
        }
        models.push(std::fs::read(out_dir.join("model.json")).unwrap());
    }
    assert_eq!(models[0], models[1], "same config and seed must give identical model files");
}

#[test]
fn recorded_source_accuracy_matches_a_fresh_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let file = load_model(&out_dir.join("model.json")).unwrap();
    let spec = toy_spec(&ToyParams::new(1.0, 2.0, 0.4, 0.25).unwrap()).unwrap();
    let held_out = sample_balanced(&spec, 200, derive_seed(3, "pretrain-eval", 0)).unwrap();
    let fresh = evaluate(&file.model, &held_out, BnMode::Eval).unwrap();
    assert!(
        (file.source_accuracy - fresh).abs() < 1e-10,
        "metadata says {}, re-evaluation says {fresh}",
        file.source_accuracy
    );
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let base = dir.path().join("base");
    let reseeded = dir.path().join("reseeded");
    for (out_dir, extra) in [(&base, None), (&reseeded, Some("11"))] {
        let mut args = vec![
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ];
        if let Some(seed) = extra {
            args.extend(["--seed", seed]);
        }
        assert!(run(&args).status.success());
    }
    let a = std::fs::read(base.join("model.json")).unwrap();
    let b = std::fs::read(reseeded.join("model.json")).unwrap();
    assert_ne!(a, b, "a different seed must change the trained model");
}

#[test]
fn tampered_model_format_is_rejected_by_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    assert!(run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap()
    ])
    .status
    .success());
    let model_path = out_dir.join("model.json");
    let text = std::fs::read_to_string(&model_path).unwrap();
    std::fs::write(&model_path, text.replace("shiftlab-model/1", "shiftlab-model/9")).unwrap();
    let out = run(&[
        "adapt",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown model format must be a config error");
    assert!(!out.stderr.is_empty());
}

#[test]
fn adapt_writes_run_and_confusion_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    for cmd in ["pretrain", "adapt"] {
        let out = run(&[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    let names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(
        names.iter().any(|n| n.starts_with("run_") && n.ends_with(".json")),
        "no run file in {names:?}"
    );
    assert!(
        names.iter().any(|n| n.starts_with("confusion_") && n.ends_with(".csv")),
        "no confusion file in {names:?}"
    );
}
