use std::path::Path;
use std::process::{Command, Output};

use avfuse::harness::config::ExperimentConfig;

fn avfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avfuse")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_smoke_config(dir: &Path) {
    std::fs::write(dir.join("smoke.toml"), ExperimentConfig::smoke().to_toml()).unwrap();
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[decode]\nalpha = 0.3\nbeta = 1\n").unwrap();
    let out = avfuse(dir.path(), &["--config", "bad.toml", "gen-corpus"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_of_range_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = avfuse(dir.path(), &["sweep", "--alpha", "1.5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = avfuse(dir.path(), &["--config", "nope.toml", "gen-corpus"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn fuse_without_single_stream_checkpoints_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = avfuse(dir.path(), &["--workdir", "run", "fuse", "--mode", "dfn"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ao.ckpt"));
}

#[test]
fn decode_without_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = avfuse(dir.path(), &["decode", "--mode", "ao"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn fusion_phase_through_train_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = avfuse(dir.path(), &["train", "--phase", "dfn"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn smoke_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_smoke_config(d);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "smoke.toml", "--workdir", "run"];
        full.extend_from_slice(args);
        let out = avfuse(d, &full);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-corpus"]);
    assert!(d.join("run/corpus/test.tsv").exists());
    run(&["train", "--phase", "ao"]);
    run(&["train", "--phase", "vo"]);

    // The AO checkpoint exists but no LM was trained.
    let out = avfuse(d, &["--config", "smoke.toml", "--workdir", "run", "decode", "--mode", "ao"]);
    assert_eq!(code(&out), 3);

    run(&["fuse", "--mode", "dfn"]);
    let decoded = run(&["decode", "--mode", "dfn", "--theta", "0", "--beam", "2", "--snr", "-6"]);
    let lines: Vec<&str> = decoded.lines().collect();
    assert_eq!(lines.len(), ExperimentConfig::smoke().corpus.test);
    assert!(lines.iter().all(|l| l.split('\t').count() == 3));

    let wer: f64 = run(&["eval", "--mode", "ao", "--theta", "0", "--split", "dev"]).trim().parse().unwrap();
    assert!(wer >= 0.0);

    let sweep = run(&["sweep", "--theta", "0", "--beam", "2"]);
    assert!(sweep.starts_with("# avg."));
    assert!(d.join("run/sweep.tsv").exists());
    // AV-concat and stream-weight were never trained, so their rows failed.
    let sw = sweep.lines().find(|l| l.starts_with("SW(")).unwrap();
    assert!(sw.contains("failed"));
    let dfn = sweep.lines().find(|l| l.starts_with("DFN(")).unwrap();
    assert!(!dfn.contains("failed"));
}
