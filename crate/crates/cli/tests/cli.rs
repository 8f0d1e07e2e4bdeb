//! End-to-end runs of the `mpsynth` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpsynth")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(out: &Path, cases: &str, seed: &str) {
    let o = mpsynth(&["gen-data", "--out", path(out), "--cases", cases, "--size", "32", "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    let o = mpsynth(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-data"));

    let o = mpsynth(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = mpsynth(&["gen-data", "--cases", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path(), "6", "11");
    gen_data(b.path(), "6", "11");
    let manifest = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.path().join("manifest.json")).unwrap());
    for name in ["p1", "p2", "p3", "y"] {
        let f = format!("case_0003/{name}.mpt");
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    gen_data(d.path(), "10", "3");
    let report = d.path().join("report.csv");
    // The dataset layout already has <id>/y.mpt, so it doubles as a prediction dir.
    let o = mpsynth(&[
        "eval",
        "--pred-dir",
        path(d.path()),
        "--data",
        path(d.path()),
        "--report",
        path(&report),
        "--split",
        "all",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,ssim,psnr_db,nmse,lp");
    assert_eq!(lines.len(), 1 + 10 + 2);
    for row in &lines[1..11] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 1.0, "{row}");
        assert_eq!(f[2], "inf", "{row}");
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn eval_reports_missing_predictions_as_io_error() {
    let d = tempfile::tempdir().unwrap();
    gen_data(d.path(), "5", "1");
    let empty = tempfile::tempdir().unwrap();
    let o = mpsynth(&[
        "eval",
        "--pred-dir",
        path(empty.path()),
        "--data",
        path(d.path()),
        "--report",
        path(&d.path().join("r.csv")),
        "--split",
        "all",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn errmap_writes_png_and_rejects_bad_display_range() {
    let d = tempfile::tempdir().unwrap();
    gen_data(d.path(), "5", "2");
    let truth = d.path().join("case_0000/y.mpt");
    let out = d.path().join("err.png");
    let o = mpsynth(&["errmap", "--pred", path(&truth), "--truth", path(&truth), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&out).unwrap()[1..4], b"PNG");

    let o = mpsynth(&[
        "errmap",
        "--pred",
        path(&truth),
        "--truth",
        path(&truth),
        "--out",
        path(&out),
        "--max-display",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_tensor_is_a_format_error() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.mpt");
    fs::write(&bad, b"MPT9....").unwrap();
    let o = mpsynth(&["errmap", "--pred", path(&bad), "--truth", path(&bad), "--out", path(&d.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn gradcheck_op_scope_passes() {
    let o = mpsynth(&["gradcheck", "--scope", "op"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 20 && !out.contains("FAIL"));
}

#[test]
fn train_then_synth_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    gen_data(&data, "8", "4");
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 1, "base_width": 8}"#).unwrap();
    let run = d.path().join("run");
    let o = mpsynth(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("losses.csv").is_file() && run.join("metrics.csv").is_file());

    let ckpt = run.join("ckpt_epoch_1");
    let y = d.path().join("y.mpt");
    let png = d.path().join("y.png");
    let o = mpsynth(&[
        "synth",
        "--ckpt",
        path(&ckpt),
        "--case-dir",
        path(&data.join("case_0000")),
        "--out-tensor",
        path(&y),
        "--out-png",
        path(&png),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::metadata(&y).unwrap().len(), 8 + 3 * 4 + 32 * 32 * 4);
    assert!(png.is_file());

    fs::write(&cfg, r#"{"epochs": 1, "warmup": 3}"#).unwrap();
    let o = mpsynth(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    assert_eq!(o.status.code(), Some(1));
}
