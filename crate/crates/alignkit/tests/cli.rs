use std::path::Path;
use std::process::{Command, Output};

use alignkit::dataset::read_dataset;
use serde_json::Value;

fn alignkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignkit"))
        .args(args)
        .env_remove("ALIGNKIT_THREADS")
        .output()
        .unwrap()
}

fn report(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_then_eval_rectify_and_sr() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let r = report(&alignkit(&["synth", "--frames", "3", "--size", "24", "--misalign", "2,-1", "--gain", "1.2", "--out", p(&ds)]));
    assert_eq!(r["config"]["size"], 24);
    assert!(r["wall_clock_s"].as_f64().is_some());
    let seq = read_dataset(&ds).unwrap();
    assert_eq!(seq.lr[0].dims(), &[3, 24, 24]);
    assert_eq!(seq.hr[0].dims(), &[3, 96, 96]);

    let r = report(&alignkit(&["align-eval", p(&ds), "--ablate", "--fit-budget", "40"]));
    assert_eq!(r["rows"].as_array().unwrap().len(), 3);
    assert_eq!(r["pairs"], 2);

    let out = dir.path().join("rect");
    let r = report(&alignkit(&["rectify", p(&ds), "--out", p(&out)]));
    assert_eq!(r["rows"].as_array().unwrap().len(), 4);
    for f in ["y_w_0000.ppm", "mask_0002.pgm", "flow_0001.vten", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let out = dir.path().join("sr");
    let r = report(&alignkit(&["sr", p(&ds), "--out", p(&out)]));
    assert_eq!(r["output_size"], serde_json::json!([96, 96]));
    assert!(r["metrics"]["mean_psnr"].as_f64().unwrap() > 10.0);
    assert!(out.join("0002.ppm").is_file());
}

#[test]
fn weights_archive_feeds_sr() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let r = report(&alignkit(&["init-weights", "--scale", "2", "--zero", "--out", p(&w)]));
    assert!(r["parameters"].as_u64().unwrap() > 0);
    let frames = dir.path().join("x.vten");
    let t = alignkit::core::tensor::Tensor::from_fn_chw(3, 16, 16, |c, y, x| ((c + y + x) % 7) as f32 / 7.0);
    alignkit::vten::save(&frames, &t).unwrap();
    let r = report(&alignkit(&["sr", p(&frames), "--weights", p(&w), "--out", p(&dir.path().join("o"))]));
    assert_eq!(r["output_size"], serde_json::json!([32, 32]));
    assert_eq!(r["metrics"], Value::Null);
    let bad = alignkit(&["sr", p(&frames), "--weights", p(&w), "--scale", "4", "--out", p(&dir.path().join("o"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let r = report(&alignkit(&["gradcheck", "--points", "50"]));
    assert_eq!(r["pass"], true);
}

#[test]
fn exit_codes() {
    assert_eq!(alignkit(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(alignkit(&["align-eval"]).status.code(), Some(2));
    assert_eq!(alignkit(&["synth", "--velocity", "1", "--out", "x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = alignkit(&["align-eval", p(&dir.path().join("none"))]);
    assert_eq!(missing.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("corrupt dataset"));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_alignkit"))
        .args(["sr", p(&dir.path().join("x.vten")), "--out", p(dir.path())])
        .env("ALIGNKIT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}
