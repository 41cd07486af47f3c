use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relay_splat::config::PipelineConfig;
use relay_splat::synth::{DeskMotion, SceneSpec};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relay-splat"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// A 16×16, 12-frame desk scene and a few-step configuration.
fn tiny_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let mut spec = SceneSpec::desk(3, DeskMotion::Linear);
    spec.image_size = 16;
    spec.frame_count = 12;
    spec.cameras.focal = 17.5;
    let spec_path = dir.join("scene.cfg");
    std::fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();

    let mut cfg = PipelineConfig::desk();
    cfg.mask.steps = 4;
    cfg.relay.steps = 4;
    cfg.relay.segment_length = 4;
    cfg.deform.steps = 4;
    cfg.test_cameras = vec![1];
    let cfg_path = dir.join("train.cfg");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    (spec_path, cfg_path)
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = tiny_inputs(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--spec", s(&spec), "--out", s(&a)]);
    ok(&["gen", "--spec", s(&spec), "--out", s(&b)]);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 8 * 12);
    assert_eq!(fa, fb);
}

#[test]
fn eval_of_ground_truth_against_itself_is_infinite() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = tiny_inputs(dir.path());
    let data = dir.path().join("d");
    ok(&["gen", "--spec", s(&spec), "--out", s(&data)]);
    let report = dir.path().join("r.toml");
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--images",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert!(out.contains("PSNR inf dB"), "{out}");
    let r =
        relay_splat::metrics::MetricReport::from_toml(&std::fs::read_to_string(&report).unwrap())
            .unwrap();
    assert_eq!(r.views.len(), 8 * 12);
    assert!(r
        .views
        .iter()
        .all(|v| v.psnr == f64::INFINITY && v.ssim == 1.0));
}

#[test]
fn stage_by_stage_matches_all_stages() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, cfg) = tiny_inputs(dir.path());
    let data = dir.path().join("d");
    ok(&["gen", "--spec", s(&spec), "--out", s(&data)]);
    let (all, step) = (dir.path().join("all"), dir.path().join("step"));
    let common = ["--data", s(&data), "--config", s(&cfg), "--deterministic"];
    ok(&[&["train", "--out", s(&all), "--stage", "all"], &common[..]].concat());
    for stage in ["1", "2", "3"] {
        ok(&[&["train", "--out", s(&step), "--stage", stage], &common[..]].concat());
    }
    for stage in 1..=3 {
        let name = format!("stage{stage}.ckpt");
        let (a, b) = (
            std::fs::read(all.join(&name)).unwrap(),
            std::fs::read(step.join(&name)).unwrap(),
        );
        assert!(a == b, "{name} differs");
    }
    assert!(all.join("metrics.toml").is_file());

    let ck = all.join("stage3.ckpt");
    let frames = dir.path().join("render");
    ok(&[
        "render",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&frames),
        "--cameras",
        "1",
        "--frames",
        "2-3",
    ]);
    assert_eq!(files(&frames).len(), 2);
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--images",
        s(&frames),
        "--cameras",
        "1",
        "--frames",
        "2-3",
    ]);
    assert!(out.contains("over 2 views"), "{out}");
    let out = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck)]);
    assert!(out.contains("over 12 views"), "{out}");

    let ply = dir.path().join("cloud.ply");
    ok(&["export-ply", "--checkpoint", s(&ck), "--out", s(&ply)]);
    let cloud = relay_splat::io::import_ply(&ply).unwrap();
    let model = relay_splat::io::load_checkpoint(&ck, None).unwrap().model;
    // The densification generation counter is not part of the file.
    assert!(cloud.gaussians == model.cloud.gaussians);
}

#[test]
fn user_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--data", s(&missing), "--out", s(dir.path())],
        vec![
            "render",
            "--checkpoint",
            s(&missing),
            "--out",
            s(dir.path()),
        ],
        vec!["export-ply", "--checkpoint", s(&missing), "--out", "x.ply"],
        vec!["gen", "--spec", s(&missing), "--out", s(dir.path())],
        vec!["train", "--stage", "4", "--data", "d", "--out", "o"],
        vec!["frobnicate"],
        vec!["eval", "--data", "d"],
    ];
    for args in cases {
        let out = run(&args);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(err.contains("error"), "{args:?}: {err}");
        assert!(
            !err.contains("panicked") && !err.contains("stack backtrace"),
            "{args:?}: {err}"
        );
    }
    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = run(&["export-ply", "--checkpoint", s(&garbage), "--out", "x.ply"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: format error"));

    let out = bin()
        .env("RELAY_SPLAT_THREADS", "zero")
        .args(["export-ply", "--checkpoint", s(&garbage), "--out", "x.ply"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("RELAY_SPLAT_THREADS"));
}

#[test]
fn gradcheck_runs_a_small_suite() {
    let out = ok(&[
        "gradcheck",
        "--seeds",
        "2",
        "--size",
        "16",
        "--gaussians",
        "4",
    ]);
    assert!(out.contains("pass"), "{out}");
    assert!(out.contains("hexplane"), "{out}");
}
