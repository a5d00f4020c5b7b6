use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_gesture-diff");

const TINY: &str = r#"{
  "synthetic": {"num_clips": 3, "frames_per_clip": 64, "num_keypoints": 6, "seed": 5},
  "model": {"hidden_dim": 16, "num_blocks": 1, "num_heads": 2, "ff_mult": 2},
  "schedule": {"T": 20},
  "train": {"num_frames": 16, "num_init": 4, "stride": 8, "batch_size": 4, "max_steps": 6, "checkpoint_every": 3},
  "autoencoder": {"latent_dim": 4, "hidden_dim": 8, "steps": 20, "batch_size": 4},
  "preview": {"width": 48, "height": 40}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("GESTURE_DIFF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(root: &Path) {
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, run_dir, gen, ev, pv) = (
        root.join("data"),
        root.join("run"),
        root.join("gen"),
        root.join("eval"),
        root.join("preview"),
    );
    ok(&["make-synthetic", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir)]);
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.is_file());
    let clip = data.join("clip_0000");
    ok(&[
        "generate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--audio",
        s(&clip.join("audio.wav")),
        "--source-keypoints",
        s(&clip),
        "--out",
        s(&gen),
        "--s",
        "0.5",
        "--seed",
        "3",
    ]);
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--generated", s(&gen), "--out", s(&ev)]);
    let m: Value = serde_json::from_slice(&std::fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(m["div"].as_f64().unwrap().is_finite());
    let bc = m["bc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&bc));
    ok(&[
        "preview",
        "--config",
        s(&cfg),
        "--driving",
        s(&gen.join("driving.json")),
        "--source-keypoints",
        s(&clip),
        "--out",
        s(&pv),
    ]);
    let pngs = std::fs::read_dir(&pv)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_"))
        .count();
    assert!(pngs >= 16, "only {pngs} preview frames");
    assert!(pv.join("preview_meta.json").is_file());
}

#[test]
fn end_to_end_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let da = std::fs::read(a.path().join("gen/driving.json")).unwrap();
    let db = std::fs::read(b.path().join("gen/driving.json")).unwrap();
    assert_eq!(da, db);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = run(&[
        "generate",
        "--checkpoint",
        s(&missing),
        "--audio",
        s(&missing),
        "--source-keypoints",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    let line: Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["path"].as_str().unwrap(), s(&missing));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["make-synthetic", "--out", s(dir.path()), "--set", "synthetic.clips=2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("synthetic.clips"), "{err}");
}
