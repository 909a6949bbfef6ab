use std::path::Path;
use std::process::{Command, Output};

fn mage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mage")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: &str = r#"
[model]
latent_dim = 8
blocks = [1, 1, 1]
window = 24
t_max = 50

[train]
batch_size = 2
steps = 3
history = 4

[inference]
window = 24
history = 4
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a small dataset and trains a tiny checkpoint in `dir`.
fn setup(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let o = mage(&["synth", "--kind", "mixed", "--count", "3", "--frames", "40", "--fps", "30", "--seed", "1", "--out", s(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mage(&[
        "train",
        "--data",
        s(&dir.join("data")),
        "--config",
        s(&dir.join("tiny.toml")),
        "--seed",
        "2",
        "--out-checkpoint",
        s(&dir.join("m.magk")),
        "--log",
        s(&dir.join("log.jsonl")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let manifest = std::fs::read_to_string(d.join("data/manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[clip]]").count(), 3);
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["l_obj"].as_f64().unwrap().is_finite());
    }

    let sample = |seed: &str, out: &str| {
        mage(&[
            "sample",
            "--checkpoint",
            s(&d.join("m.magk")),
            "--conditions",
            s(&d.join("data/clip_0000.mage")),
            "--seed",
            seed,
            "--out",
            s(&d.join(out)),
            "--config",
            s(&d.join("tiny.toml")),
            "--csv",
            s(&d.join("pos.csv")),
        ])
    };
    let o = sample("5", "a.mage");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["frames"], 40);
    assert_eq!(std::fs::read_to_string(d.join("pos.csv")).unwrap().lines().count(), 1 + 40 * 22);
    assert_eq!(code(&sample("5", "b.mage")), 0);
    assert_eq!(std::fs::read(d.join("a.mage")).unwrap(), std::fs::read(d.join("b.mage")).unwrap());

    let o = mage(&["eval", "--checkpoint", s(&d.join("m.magk")), "--data", s(&d.join("data")), "--report", s(&d.join("r.jsonl"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3]["summary"]["mpjpe"].as_f64().unwrap().is_finite());
    assert!(lines[3]["rest_pose_baseline"]["mpjpe"].as_f64().unwrap() > 0.0);

    let o = mage(&["bench", "--checkpoint", s(&d.join("m.magk")), "--iterations", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["report"]["latency_ms_per_frame"].as_f64().unwrap() > 0.0);
    assert_eq!(v["report"]["plan_steps"], 4);
    assert_eq!(v["report"]["latent_dim"], 8);

    // Exit-code contract on the same artifacts.
    let o = mage(&["bench", "--checkpoint", s(&d.join("m.magk")), "--iterations", "0"]);
    assert_eq!(code(&o), 2);
    let other = TINY.replace("t_max = 50", "t_max = 50\nstages = [\"S3\"]");
    std::fs::write(d.join("s3.toml"), other).unwrap();
    let o = mage(&["bench", "--checkpoint", s(&d.join("m.magk")), "--config", s(&d.join("s3.toml"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(d.join("m.magk")).unwrap();
    std::fs::write(d.join("cut.magk"), &bytes[..bytes.len() / 3]).unwrap();
    let o = mage(&["bench", "--checkpoint", s(&d.join("cut.magk"))]);
    assert_eq!(code(&o), 4);
    let o = mage(&["eval", "--checkpoint", s(&d.join("m.magk")), "--data", s(&d.join("missing"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn argument_errors_exit_2() {
    assert_eq!(code(&mage(&[])), 2);
    assert_eq!(code(&mage(&["synth"])), 2);
    assert_eq!(code(&mage(&["synth", "--kind", "dance", "--out", "x"])), 2);
    assert_eq!(code(&mage(&["frobnicate"])), 2);
    assert_eq!(code(&mage(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let o = mage(&["train", "--data", "x", "--config", s(&dir.path().join("bad.toml")), "--out-checkpoint", "y"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.mage"), b"not a motion file").unwrap();
    let o = mage(&["train", "--data", s(&dir.path().join("junk.mage")), "--out-checkpoint", s(&dir.path().join("m"))]);
    assert_eq!(code(&o), 3);
    let o = mage(&["synth", "--frames", "1", "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = mage(&["bench", "--checkpoint", s(&dir.path().join("nope.magk"))]);
    assert_eq!(code(&o), 4);
}
