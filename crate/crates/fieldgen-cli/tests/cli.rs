//! End-to-end CLI exercises: exit codes and the
//! gen-data -> train -> sample -> eval pipeline on a very small run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fieldgen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldgen"))
        .args(args)
        .current_dir(dir)
        .env("FIELDGEN_THREADS", "2")
        .output()
        .expect("spawn fieldgen")
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"profile":"desk","wat":1}"#).unwrap();
    let out = fieldgen(&["gen-data", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fieldgen(&["train", "--config", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "profile": "desk",
        "dataset": {"dir": "data", "samples": 5, "fdtd_steps": 400, "heldout_fraction": 0.2},
        "train": {
            "epochs": 1, "vae_epochs": 1, "batch_size": 4,
            "checkpoint_every": 1, "eval_every": 0
        },
        "sample": {
            "checkpoint": "runs/train/checkpoint_final.ckpt",
            "steps": 5,
            "source": {"x": 30, "y": 28, "width": 3, "height": 2, "amplitude": 1.0, "wavelength": 20.0}
        },
        "eval": {"checkpoint": "runs/train/checkpoint_final.ckpt", "dataset": "data"}
    });
    fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(&config).unwrap())
        .unwrap();

    let out = fieldgen(&["gen-data", "--config", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/manifest.json").exists());
    assert_eq!(fs::read_dir(dir.path().join("data/samples")).unwrap().count(), 5);

    let out = fieldgen(&["train", "--config", "run.json", "--out", "runs/train"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("runs/train/checkpoint_final.ckpt").exists());
    let metrics = fs::read_to_string(dir.path().join("runs/train/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,l_diff,l_recon,l_edge,l_perc,l_prior,total,alpha"));

    let out = fieldgen(&["sample", "--config", "run.json", "--out", "runs/s1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/s1/sample.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["steps"], 5);
    assert_eq!(sidecar["guidance"], 2.5);

    // Same seed: identical image bytes.
    let out = fieldgen(&["sample", "--config", "run.json", "--out", "runs/s2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let a = fs::read(dir.path().join("runs/s1/sample.pgm")).unwrap();
    let b = fs::read(dir.path().join("runs/s2/sample.pgm")).unwrap();
    assert_eq!(a, b);

    let out = fieldgen(&["eval", "--config", "run.json", "--out", "runs/eval"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let per_sample =
        fs::read_to_string(dir.path().join("runs/eval/metrics_per_sample.csv")).unwrap();
    assert_eq!(per_sample.lines().count(), 2); // header + 1 held-out row

    // Corrupt one held-out byte: eval must refuse with exit code 3.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/manifest.json")).unwrap())
            .unwrap();
    let heldout_file = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["split"] == "heldout")
        .map(|e| e["file"].as_str().unwrap().to_string())
        .unwrap();
    let sample_path = dir.path().join("data").join(&heldout_file);
    let mut bytes = fs::read(&sample_path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&sample_path, bytes).unwrap();
    let out = fieldgen(&["eval", "--config", "run.json", "--out", "runs/eval2"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
