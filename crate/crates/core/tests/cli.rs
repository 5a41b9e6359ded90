use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mono3d::commands::{evaluate_frames, load_eval_frames, load_manifest, LABEL_DIR, MANIFEST, PREDICTION_DIR};
use mono3d::config::RunConfig;

fn mono3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mono3d")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, scenes: usize) {
    ok(&mono3d(&[
        "synth",
        "--seed",
        "5",
        "--scenes",
        &scenes.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
}

#[test]
fn manifest_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 3);
    let text = fs::read_to_string(tmp.path().join(MANIFEST)).unwrap();
    let cfg = load_manifest(tmp.path()).unwrap();
    assert_eq!(cfg.seed, Some(5));
    assert_eq!(cfg.scenes, 3);
    assert_eq!(cfg.to_text(), text);
    assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
}

#[test]
fn ground_truth_against_itself_scores_full_marks() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 6);
    let gt = tmp.path().join(LABEL_DIR);
    let gt = gt.to_str().unwrap();
    let table = ok(&mono3d(&["eval", "--gt", gt, "--pred", gt]));
    let frames = load_eval_frames(Path::new(gt), Path::new(gt)).unwrap();
    let lib = evaluate_frames(&RunConfig::default(), &frames);
    assert_eq!(table, lib.table);
    let values: Vec<f64> = lib.rows.iter().flat_map(|r| r.values.iter().flatten().copied()).collect();
    assert!(!values.is_empty());
    assert!(values.iter().all(|v| *v == 100.0), "{table}");
}

#[test]
fn empty_predictions_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 4);
    let gt = tmp.path().join(LABEL_DIR);
    let pred = tmp.path().join("empty");
    fs::create_dir(&pred).unwrap();
    for entry in fs::read_dir(&gt).unwrap() {
        fs::write(pred.join(entry.unwrap().file_name()), "").unwrap();
    }
    ok(&mono3d(&["eval", "--gt", gt.to_str().unwrap(), "--pred", pred.to_str().unwrap()]));
    let frames = load_eval_frames(&gt, &pred).unwrap();
    let lib = evaluate_frames(&RunConfig::default(), &frames);
    let values: Vec<f64> = lib.rows.iter().flat_map(|r| r.values.iter().flatten().copied()).collect();
    assert!(!values.is_empty());
    assert!(values.iter().all(|v| *v == 0.0), "{}", lib.table);
}

#[test]
fn fit_then_eval_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data, 5);
    ok(&mono3d(&["fit", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    let gt = data.join(LABEL_DIR);
    let pred = run.join(PREDICTION_DIR);
    let table = ok(&mono3d(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--interpolation",
        "41",
        "--alp-gate",
        "none",
    ]));
    let mut cfg = RunConfig::default();
    cfg.eval.interpolation = mono3d::metrics::Interpolation::FortyOne;
    cfg.eval.alp_gate_iou = None;
    let lib = evaluate_frames(&cfg, &load_eval_frames(&gt, &pred).unwrap());
    assert_eq!(table, lib.table);
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| mono3d(args).status.code().unwrap();
    assert_eq!(code(&["synth", "--bogus-flag"]), 1);
    assert_eq!(code(&["synth", "--seed", "1", "--scenes", "2"]), 1);
    assert_eq!(code(&["synth", "--seed", "1", "--set", "noise.box_px_sigma=-1", "--out", "x"]), 1);
    let missing = tmp.path().join("absent");
    assert_eq!(code(&["fit", "--data", missing.to_str().unwrap(), "--out", "x"]), 2);

    synth(&tmp.path().join("a"), 3);
    synth(&tmp.path().join("b"), 2);
    let a = tmp.path().join("a").join(LABEL_DIR);
    let b = tmp.path().join("b").join(LABEL_DIR);
    assert_eq!(code(&["eval", "--gt", a.to_str().unwrap(), "--pred", b.to_str().unwrap()]), 2);
    fs::write(b.join("000001.txt"), "Car 0 0 0 1 2 3\n").unwrap();
    assert_eq!(code(&["eval", "--gt", b.to_str().unwrap(), "--pred", b.to_str().unwrap()]), 2);
}
