//! End-to-end checks of the command-line surface on a miniature spec.

use std::path::Path;
use std::process::Command;

fn actvar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_actvar"))
}

fn tiny_spec_json(dir: &Path) -> std::path::PathBuf {
    let spec = serde_json::json!({
        "backbone": {
            "depth": 2, "hidden": 16, "heads": 2, "ffn_hidden": 32,
            "vocab": 16, "classes": 3, "sides": [1, 2, 3]
        },
        "activation": {
            "token_ratios": [0.75, 0.75], "weight_ratio": 0.75,
            "experts": 4, "scales": [2, 3]
        },
        "dataset": { "samples_per_class": 10, "noise": 0.1 },
        "teacher": { "epochs": 2, "lr": 0.003, "batch_size": 8 },
        "stage1": {
            "stage": "One", "alpha": 0.05, "beta": 0.01, "lr": 0.05,
            "batch_size": 8, "epochs": 1, "beta1": 0.9, "beta2": 0.95,
            "weight_decay": 0.05
        },
        "stage2": {
            "stage": "Two", "alpha": 0.05, "beta": 0.01, "lr": 0.001,
            "batch_size": 8, "epochs": 1, "beta1": 0.9, "beta2": 0.95,
            "weight_decay": 0.05
        },
        "seed": 5
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec_json(dir.path());
    for sub in ["a", "b"] {
        let out = actvar()
            .args(["gen-data", "--config"])
            .arg(&spec)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["train.bin", "val.bin", "meta.json"] {
        let a = std::fs::read(dir.path().join("a/dataset").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b/dataset").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical invocations");
    }
}

#[test]
fn flops_subcommand_prints_the_convention_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = actvar()
        .args([
            "flops",
            "--ratios",
            "75,75,75",
            "--scales",
            "9,10",
            "--experts",
            "16",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline per block per step"));
    assert!(stdout.contains("net saving"));
    assert!(dir.path().join("cost_report.json").exists());
}

#[test]
fn invalid_config_fails_with_named_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec_json(dir.path());
    let out = actvar()
        .args(["flops", "--config"])
        .arg(&spec)
        .args(["--experts", "5", "--out"]) // 5 does not divide 32
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config error"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_then_eval_and_export_maps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec_json(dir.path());
    let run_dir = dir.path().join("run");

    let out = actvar()
        .args(["train-actvar", "--config"])
        .arg(&spec)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.json", "teacher.ckpt", "student.ckpt", "cost_report.txt"] {
        assert!(run_dir.join(f).exists(), "{f} missing after train-actvar");
    }

    let out = actvar().args(["eval", "--out"]).arg(&run_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("teacher validation cross-entropy"));
    assert!(stdout.contains("student validation cross-entropy"));

    let out = actvar()
        .args(["export-maps", "--out"])
        .arg(&run_dir)
        .args(["--scales", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("maps/union_scale2.pgm").exists());
    // PGM header sanity
    let pgm = std::fs::read(run_dir.join("maps/union_scale2.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
}
