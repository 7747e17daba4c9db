//! End-to-end checks of the command-line binary: exit codes, artifact
//! layout, and override handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distilda"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("distilda-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "run_name": "cli",
        "procedure": "stda",
        "train": {"epochs": 2, "batch_size": 16, "seed": 5},
        "teacher_hidden": [8, 4],
        "student_hidden": [4],
        "source": {"kind": "two_moons", "n": 60, "noise_sigma": 0.2, "rotation_deg": 0.0,
                    "seed": 11, "domain_id": "source"},
        "targets": [{"kind": "two_moons", "n": 40, "noise_sigma": 0.2, "rotation_deg": 30.0,
                      "seed": 12, "domain_id": "target"}]
    });
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let out = bin()
        .args(["train", "--config", "/no/such/config.json", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/no/such/config.json"));
}

#[test]
fn train_writes_artifacts() {
    let dir = tmp("train");
    let cfg = write_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["config.json", "metrics.csv", "summary.json", "student.ckpt", "teacher_0.ckpt"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("run,epoch,model,domain,metric,value"));
    assert!(csv.lines().count() > 1);

    // `eval` reloads the student checkpoint and reports per-domain accuracy.
    let eval = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("student.ckpt"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", stderr(&eval));
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("source") && text.contains("target"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn zero_epoch_override_yields_header_only_metrics() {
    let dir = tmp("zero");
    let cfg = write_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--override", "epochs=0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.trim_end().lines().count(), 1);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tmp("badkey");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(["--override", "train.not_a_field=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("not_a_field"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn sweep_produces_one_dir_per_value_and_an_aggregate() {
    let dir = tmp("sweep");
    let cfg = write_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--axis", "seed", "--values", "1,2,3"])
        .env("DA_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for v in ["1", "2", "3"] {
        assert!(out_dir.join(format!("seed_{v}")).join("metrics.csv").is_file());
    }
    let agg = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(agg.contains("mean") && agg.contains("std"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn gradcheck_subcommand_reports_per_op_lines() {
    let out = bin()
        .args(["gradcheck", "--instances", "2", "--seed", "0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("matmul") && text.contains("mmd_gaussian"));
}
