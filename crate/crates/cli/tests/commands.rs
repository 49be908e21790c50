//! End-to-end runs of the `cellseg` binary.

use std::path::Path;
use std::process::{Command, Output};

use cellseg::checkpoint::Checkpoint;
use cellseg::MetricsReport;

fn cellseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellseg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr_line_count(out: &Output) -> usize {
    String::from_utf8_lossy(&out.stderr).trim().lines().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = "\
channels = 8
downsample = 2
model_dim = 8
heads = 2
[text]
dim = 8
";

fn gen(dir: &Path, patches: &str, size: &str, classes: &str) {
    let out = cellseg(&["gen-synthetic", "--out", s(dir), "--patches", patches, "--size", size, "--classes", classes, "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        vec!["frobnicate"],
        vec!["train", "--data", "x"],
        vec!["gen-synthetic", "--out", "x", "--patches", "many", "--size", "8", "--classes", "2"],
        vec!["check", "--suite", "everything"],
    ] {
        let out = cellseg(&args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert_eq!(stderr_line_count(&out), 1, "{args:?}");
    }
    assert_eq!(code(&cellseg(&["--help"])), 0);
}

#[test]
fn train_without_stage_qt_then_eval_and_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    gen(&data, "4", "16", "3");
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let ckpt = dir.join("model.ckpt");
    let out = cellseg(&[
        "train", "--config", s(&config), "--data", s(&data), "--out", s(&ckpt), "--disable-stage", "qT", "--steps", "3",
        "--seed", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.join("model.ckpt.loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(String::from_utf8_lossy(&out.stdout), log);

    let ck = Checkpoint::load(&ckpt).unwrap();
    assert!(ck.tensors.keys().all(|k| !k.starts_with("ppd.qT.")));
    assert!(ck.tensors.keys().any(|k| k.starts_with("ppd.qh.")));
    assert_eq!(ck.config.channels, 8);

    let report = dir.join("report.json");
    let out = cellseg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let parsed = MetricsReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.per_class.len(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fg mIoU"));

    let table = dir.join("report.txt");
    assert_eq!(code(&cellseg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&table)])), 0);
    assert!(std::fs::read_to_string(&table).unwrap().contains("confusion"));

    let features = dir.join("a1.json");
    let out = cellseg(&["dump-features", "--ckpt", s(&ckpt), "--image", s(&data.join("images/0000.png")), "--stage", "a1", "--out", s(&features)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&features).unwrap().replace(' ', "");
    assert!(body.starts_with("{\"shape\":[1,8,16,16],\"data\":["), "{}", &body[..40]);
}

#[test]
fn infer_keeps_input_size_and_label_range() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    gen(&data, "2", "64", "2");
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let ckpt = dir.join("m.ckpt");
    let out = cellseg(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&ckpt), "--steps", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pred = dir.join("pred.png");
    let overlay = dir.join("overlay.png");
    let out = cellseg(&[
        "infer", "--ckpt", s(&ckpt), "--image", s(&data.join("images/0001.png")), "--out", s(&pred), "--overlay", s(&overlay),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let labels = image::open(&pred).unwrap();
    assert_eq!((labels.width(), labels.height()), (64, 64));
    let labels = labels.as_luma8().expect("grayscale label map").clone();
    assert!(labels.pixels().all(|p| p.0[0] <= 2));
    let colours = image::open(&overlay).unwrap().to_rgb8();
    assert_eq!(colours.dimensions(), (64, 64));
    let palette = [[0, 0, 0], [255, 0, 0], [0, 255, 255]];
    assert!(colours.pixels().all(|p| palette.contains(&p.0)));
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = dir.join("nothing-here");
    let out = cellseg(&["train", "--data", s(&missing), "--out", s(&dir.join("m.ckpt"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_line_count(&out), 1);
    let junk = dir.join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = cellseg(&["infer", "--ckpt", s(&junk), "--image", "x.png", "--out", s(&dir.join("o.png"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn conflicting_ablation_flags_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "1", "16", "2");
    let out = cellseg(&["train", "--data", s(&data), "--out", s(&tmp.path().join("m")), "--disable-ppd", "--disable-stage", "qv"]);
    assert_eq!(code(&out), 1);
    let out = cellseg(&["train", "--data", s(&data), "--out", s(&tmp.path().join("m")), "--disable-stage", "q9"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_all_passes_on_fresh_build() {
    let out = cellseg(&["check", "--suite", "all"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    assert!(stdout.contains(", 0 failed"));
    assert!(!stdout.contains("FAIL"));
}
