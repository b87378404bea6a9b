use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use nullport::{DatasetConfig, ExperimentConfig};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn small_config(activation: &str) -> String {
    format!(
        r#"{{
            "model": {{"kind": "mlp", "hidden": [8], "activation": {activation}}},
            "dataset": {{"kind": "mnist", "dir": {:?}, "train_count": 64, "test_count": 32}},
            "teleport": {{"batches": 2, "steps": 2, "schedule": [0]}},
            "epochs": 2,
            "seeds": [0, 1],
            "clock": "none"
        }}"#,
        data_dir()
    )
}

fn nullport(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nullport")).args(args).output().unwrap()
}

#[test]
fn train_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(r#""relu""#));
    let out = dir.path().join("out");
    let o = nullport(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics_seed7.csv")).unwrap();
    assert!(metrics.starts_with("seed,epoch,global_step,wall_seconds,train_loss,test_loss,test_accuracy,teleport\n"));
    assert_eq!(metrics.lines().count(), 4);
    assert!(!out.join("metrics_seed0.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seeds"], serde_json::json!([7]));
    assert_eq!(manifest["config"]["batch_size"], 32);
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(r#""relu""#));
    let outs = ["a", "b"].map(|n| dir.path().join(n));
    for out in &outs {
        let o = nullport(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["metrics_seed0.csv", "metrics_seed1.csv", "manifest.json"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_baseline_emits_three_files_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(r#"{"leaky_relu": {"alpha": 0.1}}"#));
    let out = dir.path().join("out");
    let o = nullport(&["compare-baseline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csvs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 6);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad_tau = write_config(dir.path(), r#"{"teleport": {"tau": 2.0}}"#);
    let o = nullport(&["train", "--config", bad_tau.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cnn = write_config(dir.path(), r#"{"model": {"kind": "cnn", "channels": [2]}}"#);
    let o = nullport(&["compare-baseline", "--config", cnn.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = nullport(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    // More teleport samples requested than the training subset holds.
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{"dataset": {{"kind": "mnist", "dir": {:?}, "train_count": 16, "test_count": 8}},
                "teleport": {{"batch_size": 32}}, "epochs": 1, "seeds": [0]}}"#,
            data_dir()
        ),
    );
    let o = nullport(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let mut cfg = ExperimentConfig::load(&path).unwrap();
            if let DatasetConfig::Mnist { dir: dir @ None, .. } = &mut cfg.dataset {
                *dir = Some(data_dir());
            }
            cfg.resolve().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen > 0);
}
