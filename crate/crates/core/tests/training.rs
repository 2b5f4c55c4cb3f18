//! End-to-end training behaviour through the public API and the binary.

use std::process::Command;

use sadrive::backbone::BackboneConfig;
use sadrive::train::{train, RunConfig};

/// Ten scenes seen over and over: the objective must fall by at least 10x.
#[test]
fn overfits_ten_scenes() {
    let cfg = RunConfig {
        train_scenes: 10,
        eval_scenes: 1,
        grid_cells: 32,
        epochs: 500.0,
        lr: 1e-3,
        lr_milestones: vec![],
        batch_size: 10,
        negatives: 16,
        max_steps: Some(500),
        gumbel: false,
        backbone: BackboneConfig::tiny(),
        ..RunConfig::default()
    };
    let t = train(&cfg, false).unwrap();
    assert_eq!(t.records.len(), 500);
    let first = t.records[0].total;
    let tail: f64 = t.records[490..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(first / tail >= 10.0, "total loss {first:.3} -> {tail:.3}, only {:.1}x", first / tail);
}

fn sadrive(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sadrive")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().display().to_string();
    // Joint stage without a dense checkpoint.
    assert_eq!(sadrive(&["train", "--stage", "joint", "--run-dir", &run]).status.code(), Some(2));
    // Unknown preset and malformed config file.
    assert_eq!(sadrive(&["train", "--backbone", "huge", "--run-dir", &run]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "learning_rate = 3").unwrap();
    assert_eq!(sadrive(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    // A diverging run is a numeric failure and leaves a dump behind.
    let out = sadrive(&[
        "train", "--backbone", "tiny", "--grid-cells", "32", "--train-scenes", "4", "--batch-size", "2", "--epochs", "3",
        "--lr", "1e30", "--run-dir", &run,
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("nan_step")));
}

/// Flags win over the config file, and the snapshot records the result.
#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = RunConfig {
        train_scenes: 4,
        grid_cells: 32,
        epochs: 1.0,
        batch_size: 2,
        lr: 5e-4,
        backbone: BackboneConfig::tiny(),
        ..RunConfig::default()
    };
    let path = dir.path().join("run.toml");
    std::fs::write(&path, file.to_toml()).unwrap();
    let run = dir.path().join("out");
    let out = sadrive(&["train", "--config", path.to_str().unwrap(), "--lr", "2e-4", "--run-dir", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snap.lr, 2e-4);
    assert_eq!(snap.train_scenes, 4);
    assert_eq!(snap.backbone, BackboneConfig::tiny());
}
