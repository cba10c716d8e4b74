// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn evgzsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evgzsl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "n_seen": 3, "n_unseen": 1, "points_per_scene": 64, "train_scenes": 6, "eval_scenes": 3,
  "classes_per_scene": 2, "cluster_std": 0.3, "embedding_dim": 12, "relatedness": 0.8, "seed": 5
}"#;

const SMALL_CONFIG: &str = r#"{
  "feature_dim": 8, "encoder_hidden": [16], "classifier_hidden": [8], "batch_points": 64,
  "phase1": {"epochs": 2, "lr": 0.003, "optimizer": "adam"},
  "phase2": {"epochs": 2, "lr": 0.001, "optimizer": "adam"},
  "phase3": {"epochs": 2, "lr": 0.003, "optimizer": "sgd-momentum"},
  "decoder": {"noise_dim": 4, "hidden": [16], "samples_per_class": 8}
}"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&evgzsl(&["--help"])), 0);
    assert_eq!(code(&evgzsl(&["--version"])), 0);
    assert_eq!(code(&evgzsl(&["no-such-command"])), 1);
    assert_eq!(
        code(&evgzsl(&["train", "--phase", "4", "--data", "x", "--out", "y"])),
        1
    );
    assert_eq!(
        code(&evgzsl(&[
            "eval",
            "--model",
            "m",
            "--data",
            "d",
            "--out",
            "o",
            "--calibration",
            "static:2"
        ])),
        1
    );
}

#[test]
fn print_config_dumps_every_default() {
    let o = evgzsl(&["train", "--print-config"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in [
        "seed",
        "phase1",
        "phase2",
        "phase3",
        "lambda_dl",
        "lambda_bl",
        "bl_orientation",
        "decoder",
    ] {
        assert!(v.get(key).is_some(), "missing {key} in {v}");
    }
    assert!(v["decoder"].get("bandwidths").is_some());

    let o = evgzsl(&["gen-data", "--print-config"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n_seen"], 6);
    assert_eq!(v["n_unseen"], 2);
}

#[test]
fn quick_selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("checks.json");
    let o = evgzsl(&[
        "selfcheck",
        "--gradient-points",
        "2",
        "--mc-cases",
        "2",
        "--mc-draws",
        "20000",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("ok")), "{text}");
    assert!(text.contains("tuning-path"));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out).unwrap()).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 15);
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    assert_eq!(
        code(&evgzsl(&["gen-data", "--spec", p(&spec), "--out", p(&d.join("data"))])),
        0
    );

    // Phase 2 before phase 1.
    let o = evgzsl(&[
        "train",
        "--phase",
        "2",
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("model")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "learning_rate": 3}"#).unwrap();
    let o = evgzsl(&[
        "train",
        "--phase",
        "1",
        "--config",
        p(&bad),
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("m")),
    ]);
    assert_eq!(code(&o), 2);

    let bad_spec = d.join("bad_spec.json");
    fs::write(&bad_spec, SMALL_SPEC.replace("0.8", "1.5")).unwrap();
    assert_eq!(
        code(&evgzsl(&["gen-data", "--spec", p(&bad_spec), "--out", p(&d.join("x"))])),
        2
    );

    // Unseen points smuggled into the training split.
    let train = d.join("data").join("train.jsonl");
    let text = fs::read_to_string(&train).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut scene: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    scene["labels"][0] = serde_json::json!(3);
    lines[0] = scene.to_string();
    fs::write(&train, lines.join("\n") + "\n").unwrap();
    let o = evgzsl(&[
        "train",
        "--phase",
        "1",
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("m2")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_recipe_on_a_small_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (spec, cfg, data, model) = (d.join("spec.json"), d.join("cfg.json"), d.join("data"), d.join("model"));
    fs::write(&spec, SMALL_SPEC).unwrap();
    fs::write(&cfg, SMALL_CONFIG).unwrap();

    assert_eq!(code(&evgzsl(&["gen-data", "--spec", p(&spec), "--out", p(&data)])), 0);
    for phase in ["1", "2", "3"] {
        let o = evgzsl(&[
            "train",
            "--phase",
            phase,
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&model),
        ]);
        assert_eq!(code(&o), 0, "phase {phase}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "phase1.ckpt",
        "phase2.ckpt",
        "phase3.ckpt",
        "phase3.log.jsonl",
        "config.json",
        "manifest.json",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(model.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoints"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["seeds"]["phase3"], 4);

    let eval = |cal: &str, out: &Path| {
        let o = evgzsl(&[
            "eval",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--calibration",
            cal,
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let none = eval("none", &d.join("none.json"));
    let zero = eval("static:0", &d.join("zero.json"));
    assert_eq!(none, zero);
    let dynamic = eval("dynamic", &d.join("dynamic.json"));
    assert_eq!(dynamic, eval("dynamic", &d.join("dynamic.json")));
    assert!(d.join("dynamic.manifest.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&dynamic).unwrap();
    assert_eq!(report["calibration"], "dynamic");
    assert!(report["u_bar"].as_array().unwrap().len() == 1);

    let csv = d.join("sweep.csv");
    let o = evgzsl(&[
        "sweep-eta",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--grid",
        "0:1:0.25",
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 + 1, "{rows}");

    let rel = d.join("reliability.json");
    let o = evgzsl(&["diagnose", "--model", p(&model), "--data", p(&data), "--out", p(&rel)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(&rel).unwrap()).unwrap();
    assert_eq!(diag["reliability"]["bins"].as_array().unwrap().len(), 10);

    // Retraining phase 1 leaves the later checkpoints stale.
    let o = evgzsl(&[
        "train",
        "--phase",
        "1",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0);
    let seeded = SMALL_CONFIG.replacen('{', "{\"seed\": 9,", 1);
    fs::write(&cfg, seeded).unwrap();
    let o = evgzsl(&[
        "train",
        "--phase",
        "1",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0);
    let o = evgzsl(&[
        "eval",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--out",
        p(&d.join("stale.json")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
