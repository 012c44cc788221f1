use std::path::Path;
use std::process::{Command, Output};

use patchformer::image::{read_image, write_image, ImageBuffer};

fn patchformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchformer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = patchformer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn gradient_png(dir: &Path, name: &str, side: usize) -> String {
    let img = ImageBuffer::from_fn(side, side, 3, |y, x, c| ((y + 2 * x + c) % 17) as f32 / 16.0).unwrap();
    let path = dir.join(name);
    write_image(&path, &img).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_train(data: &str, ckpt: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", data, "--out", ckpt, "--epochs", "2", "--batch-size", "8", "--set", "image_size=16", "--set",
        "patch_size=4", "--set", "dim=16", "--set", "heads=2", "--set", "layers=1", "--set", "mlp_head_units=8",
        "--set", "warmup_epochs=1",
    ];
    args.extend_from_slice(extra);
    patchformer(&args)
}

#[test]
fn tokenize_reports_grid_and_element_counts() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_png(dir.path(), "a.png", 72);
    let v = ok(&["tokenize", "--in", &img, "--patch", "6"]);
    assert_eq!(v["patches"], 144);
    assert_eq!(v["grid"], serde_json::json!([12, 12]));
    assert_eq!(v["elements_per_patch"], 108);

    let dump = dir.path().join("grid.png");
    let v = ok(&["tokenize", "--in", &img, "--patch", "6", "--mode", "spt", "--dump-grid", dump.to_str().unwrap()]);
    assert_eq!(v["elements_after_concat"], 540);
    assert_eq!(read_image(&dump).unwrap().dims(), (72, 360, 3));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_png(dir.path(), "a.png", 10);
    assert_eq!(patchformer(&["tokenize", "--in", &img, "--patch", "4"]).status.code(), Some(1));
    assert_eq!(patchformer(&["tokenize", "--in", &img, "--patch", "3"]).status.code(), Some(1));
    assert_eq!(patchformer(&["frobnicate"]).status.code(), Some(1));
    let out = dir.path().join("o.png");
    let out = out.to_str().unwrap();
    assert_eq!(patchformer(&["resample", "--in", &img, "--out", out, "--size", "nope"]).status.code(), Some(1));
    assert_eq!(patchformer(&["resample", "--in", &img, "--out", out, "--size", "4x4", "--kernel", "box"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_with_two() {
    let out = patchformer(&["tokenize", "--in", "/definitely/not/here.png", "--patch", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("here.png"));
}

#[test]
fn resample_writes_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_png(dir.path(), "a.png", 20);
    let out = dir.path().join("r.png");
    let v = ok(&["resample", "--in", &img, "--out", out.to_str().unwrap(), "--size", "13x7", "--kernel", "lanczos3"]);
    assert_eq!(v["out"], serde_json::json!([13, 7, 3]));
    assert_eq!(read_image(&out).unwrap().dims(), (13, 7, 3));
}

#[test]
fn augment_writes_soft_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let mixed = dir.path().join("m");
    ok(&["synth", "--classes", "2", "--per-class", "4", "--size", "8", "--out", data.to_str().unwrap()]);
    let v = ok(&["augment", "--in", data.to_str().unwrap(), "--out", mixed.to_str().unwrap(), "--pairs", "5"]);
    assert_eq!(v["pairs"], 5);
    let labels = std::fs::read_to_string(mixed.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 6);
    assert!(mixed.join("mix_00004.png").exists());
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let data = data.to_str().unwrap();
    ok(&["synth", "--classes", "3", "--per-class", "10", "--size", "16", "--seed", "2", "--out", data]);
    let ckpt = dir.path().join("run/m.ckpt");
    let out = tiny_train(data, ckpt.to_str().unwrap(), &["--mode", "spt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let roc = dir.path().join("roc");
    let v = ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data, "--split", "all", "--roc-out", roc.to_str().unwrap()]);
    let acc = v["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "{v}");
    assert!(roc.join("metrics.json").exists());

    let v = ok(&["report", "--ckpt", ckpt.to_str().unwrap(), "--passes", "100", "--warmup", "2"]);
    assert!(v["params"].as_u64().unwrap() > 0, "{v}");
    assert_eq!(patchformer(&["report", "--ckpt", ckpt.to_str().unwrap(), "--passes", "5"]).status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let data = data.to_str().unwrap();
    ok(&["synth", "--classes", "2", "--per-class", "10", "--size", "16", "--out", data]);
    let ckpt = dir.path().join("m.ckpt");
    let out = tiny_train(data, ckpt.to_str().unwrap(), &["--set", "lr=1e38", "--set", "warmup_epochs=0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = tiny_train("/no/data", ckpt.to_str().unwrap(), &["--set", "heads=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ckpt.exists());
}
