use std::path::Path;
use std::process::{Command, Output};

use sot_core::config::{RunConfig, SynthConfig};

fn sot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sot")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.data.synthetic = Some(SynthConfig {
        frames: 4,
        start: [0.0, 0.0, 0.0],
        velocity: [0.05, 0.0, 0.0],
        size: [0.5, 0.8, 0.4],
        target_points: 120,
        clutter_points: 60,
        clutter_extent: 2.0,
        ..SynthConfig::default()
    });
    cfg.train.max_steps = 3;
    cfg
}

const TRACK: &str = "# w l h 2.000000 4.000000 1.500000
0 10.000000 2.000000 0.000000 0.300000 ok
1 10.200000 2.000000 0.000000 0.300000 ok
2 10.400000 2.100000 0.000000 0.310000 ok
";

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sot(dir.path(), &["train", "--nope"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.txt"), TRACK).unwrap();
    let o = sot(dir.path(), &["eval", "--pred", "t.txt", "--gt", "t.txt", "--out", "r.txt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("r.txt")).unwrap();
    assert!(report.contains("mean.success=100.0000"), "{report}");
    assert!(report.contains("mean.precision=100.0000"), "{report}");
}

#[test]
fn malformed_track_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.txt"), TRACK).unwrap();
    std::fs::write(dir.path().join("bad.txt"), TRACK.replace("10.400000", "ten")).unwrap();
    let o = sot(dir.path(), &["eval", "--pred", "bad.txt", "--gt", "t.txt", "--out", "r.txt"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.txt:4"));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}\n[extra]\nkey = 1\n", RunConfig::toy().to_toml_string());
    std::fs::write(dir.path().join("c.toml"), text).unwrap();
    let o = sot(dir.path(), &["train", "--config", "c.toml", "--checkpoint", "m.ckpt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_then_track_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    std::fs::write(dir.path().join("c.toml"), cfg.to_toml_string()).unwrap();
    let o = sot(dir.path(), &["train", "--config", "c.toml", "--checkpoint", "m.ckpt", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8_lossy(&o.stdout);
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 3);

    let o = sot(
        dir.path(),
        &["track", "--config", "c.toml", "--checkpoint", "m.ckpt", "--sequence", "synthetic", "--out", "p.txt", "--gt-out", "g.txt"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pred = std::fs::read_to_string(dir.path().join("p.txt")).unwrap();
    assert_eq!(pred.lines().count(), 1 + 4);

    let mut other = cfg.clone();
    other.model.pyramid_levels = 2;
    std::fs::write(dir.path().join("other.toml"), other.to_toml_string()).unwrap();
    let o = sot(
        dir.path(),
        &["track", "--config", "other.toml", "--checkpoint", "m.ckpt", "--sequence", "synthetic", "--out", "x.txt"],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), tiny_config().to_toml_string()).unwrap();
    let o = sot(
        dir.path(),
        &["track", "--config", "c.toml", "--checkpoint", "absent.ckpt", "--sequence", "synthetic", "--out", "p.txt"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn config_presets_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["default", "desk", "overfit", "toy"] {
        let o = sot(dir.path(), &["config", "--preset", preset]);
        assert_eq!(code(&o), 0);
        RunConfig::from_toml_str(&String::from_utf8_lossy(&o.stdout)).unwrap();
    }
}
