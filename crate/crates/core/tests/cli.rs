use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mamba-adaptor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cli(&[])), 2);
    assert_eq!(code(&cli(&["frobnicate"])), 2);
    assert_eq!(code(&cli(&["train", "--steps", "many"])), 2);
    assert_eq!(code(&cli(&["--help"])), 0);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let o = cli(&["--config", path(&cfg), "--out", path(dir.path()), "train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    std::fs::write(&cfg, "[data]\nheight = 6\n").unwrap();
    let o = cli(&["--config", path(&cfg), "--out", path(dir.path()), "train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cli(&["--seed", "5", "--out", path(&out), "train", "--steps", "20"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("model.ckpt").exists());
        assert!(out.join("train.timings.txt").exists());
        std::fs::read(out.join("train.txt")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("seed: 5"));
    assert!(text.contains("lr=0.003"));
}

#[test]
fn zero_learning_rate_training_fails_its_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train.optimizer]\nlr = 0.0\n").unwrap();
    let o = cli(&["--config", path(&cfg), "--out", path(dir.path()), "train", "--steps", "3"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn dump_then_replay_and_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let o = cli(&["--seed", "3", "--out", path(&fx), "dump", "--op", "block"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(&["replay", path(&fx)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("status: pass"));

    let o = cli(&["replay", path(&fx.join("input.matd"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("[4, 4, 2]"));

    let expected = fx.join("expected.matd");
    let mut bytes = std::fs::read(&expected).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    std::fs::write(&expected, bytes).unwrap();
    let o = cli(&["replay", path(&fx)]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    assert_eq!(code(&cli(&["--out", path(&fx), "dump", "--op", "conv"])), 2);
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["--precision", "f32", "--out", path(dir.path()), "gen-data"]);
    assert_eq!(code(&o), 0);
    for split in ["train", "test"] {
        let labels = std::fs::read_to_string(dir.path().join(split).join("labels.txt")).unwrap();
        assert_eq!(labels.lines().count(), 64);
        assert!(dir.path().join(split).join("00063.matd").exists());
    }
}

#[test]
fn bench_writes_a_throughput_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["--out", path(dir.path()), "bench", "--lengths", "64,257"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("bench.txt")).unwrap();
    assert!(text.contains("257"));
    assert_eq!(code(&cli(&["--out", path(dir.path()), "bench", "--lengths", "0"])), 2);
}

#[test]
fn finetune_from_a_saved_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    let o = cli(&["--out", path(&base), "train", "--steps", "10"]);
    assert_eq!(code(&o), 0);
    let cfg = dir.path().join("ft.toml");
    std::fs::write(&cfg, "[block]\ninsertion = \"none\"\n[finetune]\nprobe = false\n").unwrap();
    let out = dir.path().join("ft");
    let o = cli(&[
        "--config",
        path(&cfg),
        "--out",
        path(&out),
        "finetune",
        "--steps",
        "10",
        "--base",
        path(&base.join("model.ckpt")),
    ]);
    assert_eq!(code(&o), 2, "sequential base checkpoint does not match an adaptor-free block");
    let o = cli(&["--config", path(&cfg), "--out", path(&base), "train", "--steps", "10"]);
    assert_eq!(code(&o), 0);
    let o = cli(&[
        "--config",
        path(&cfg),
        "--out",
        path(&out),
        "finetune",
        "--steps",
        "10",
        "--base",
        path(&base.join("model.ckpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("finetune.txt")).unwrap();
    assert!(text.contains("step0_max_deviation: 0e0"));
}
