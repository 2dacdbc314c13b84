use std::path::Path;
use std::process::{Command, Output};

use tbava::training::read_metrics_csv;

const SMALL: &str = r#"
[backbone]
n_classes = 3
n_layers = 2
d_visual = 16
d_audio = 16
d_text = 16
n_visual_tokens = 4
n_audio_tokens = 3
evidence_width = 8

[data]
n_classes = 3
segments = 4
evidence_width = 8
n_train = 16
n_test = 8

[train]
steps = 4
batch_size = 4
eval_every = 2
adapter_layers = [1, 2]
soft_prompts = 2

[train.adapter]
d_bottleneck = 4
d_hidden = 4
"#;

fn tbava(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbava"))
        .args(args)
        .env("TBAVA_THREADS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_exits_zero() {
    let out = tbava(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn missing_config_is_usage_error_naming_the_path() {
    let out = tbava(&["--config", "/nonexistent/run.toml", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_flag_and_bad_mode_exit_two() {
    assert_eq!(tbava(&["train", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(tbava(&["--mode", "tbava_huge", "gradcheck"]).status.code(), Some(2));
    assert_eq!(tbava(&[]).status.code(), Some(2));
}

#[test]
fn gen_data_train_eval_and_inspect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let gates = dir.path().join("gates");
    let d = data.to_string_lossy();
    let r = run.to_string_lossy();

    let out = tbava(&["--config", &cfg, "--seed", "4", "--out", &d, "gen-data"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("train.jsonl").exists());

    let out = tbava(&["--config", &cfg, "--seed", "4", "--mode", "tbava_full", "--out", &r, "train", "--data", &d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read_metrics_csv(&run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.len(), 5);
    for f in ["model.manifest.json", "model.bin", "census.json", "config.toml", "classes.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let trained_acc = metrics.last().unwrap().test_acc.unwrap();

    let out = tbava(&["eval", "--checkpoint", &r, "--data", &d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("{trained_acc:.4}")), "{stdout}");

    let out = tbava(&["--out", &gates.to_string_lossy(), "inspect-gates", "--checkpoint", &r, "--data", &d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["gates_layer1.csv", "gates_layer2.csv", "gates_layer_mean.csv"] {
        assert!(gates.join(f).exists(), "{f} missing");
    }
}

#[test]
fn inspect_gates_on_ungated_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let r = run.to_string_lossy();
    let out = tbava(&["--config", &cfg, "--mode", "tbava_no_gsm", "--set", "train.steps=1", "--out", &r, "train"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tbava(&["--out", &r, "inspect-gates", "--checkpoint", &r]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn custom_class_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let classes = dir.path().join("classes.txt");
    std::fs::write(&classes, "lion roaring\nrain\nviolin\n").unwrap();
    let run = dir.path().join("run");
    let out = tbava(&[
        "--config",
        &cfg,
        "--classes",
        &classes.to_string_lossy(),
        "--set",
        "train.steps=1",
        "--out",
        &run.to_string_lossy(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("classes.txt")).unwrap(), "lion roaring\nrain\nviolin\n");

    std::fs::write(&classes, "a\nb\n").unwrap();
    let out = tbava(&["--config", &cfg, "--classes", &classes.to_string_lossy(), "--out", &run.to_string_lossy(), "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_csv_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("abl");
    let out = tbava(&["--config", &cfg, "--out", &out_dir.to_string_lossy(), "ablate", "--seeds", "1,2,3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = tbava::experiment::AblationReport::read_csv(&out_dir.join("ablation.csv")).unwrap();
    assert_eq!(report.rows.len(), 9);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bayes_oracle"));
    let out = tbava(&["--config", &cfg, "ablate", "--seeds", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}
