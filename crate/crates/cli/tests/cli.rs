//! Process-level checks of the `mmer` binary: exit codes, the documented
//! subcommand surface, and a full generate → train → eval round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn mmer() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmer"))
}

fn run(args: &[&str]) -> Output {
    mmer().args(args).output().expect("spawn mmer")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mmer-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_toy_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("toy.conf");
    fs::write(
        &path,
        format!(
            "model_dim = 16\nlabel_attn_heads = 2\ndecoder_heads = 2\nencoder_heads = 2\n\
             visual_layers = 1\naudio_layers = 1\ntext_layers = 1\nfusion_layers = 1\n\
             ffn_multiplier = 2\nalpha = 0.05\nbeta = 0.001\ngamma = 0.5\nbatch_size = 8\n\
             base_lr = 0.002\nepochs = {epochs}\npatience = {epochs}\nseed = 3\ndropout = 0.0\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_and_flags_are_usage_errors() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&[])), 1);

    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in [
        "gen-synth",
        "train",
        "eval",
        "ablate",
        "export-correlations",
        "export-embeddings",
        "grad-check",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
}

#[test]
fn contract_violations_exit_with_code_two() {
    let dir = work_dir("contract");
    // missing config file
    let out = run(&[
        "train",
        "--config",
        dir.join("nope.conf").to_str().unwrap(),
        "--manifest",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // config with an unknown key is rejected by name
    let bad = dir.join("bad.conf");
    fs::write(&bad, "modle_dim = 8\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--manifest",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle_dim"));
}

#[test]
fn grad_check_passes_on_a_fresh_checkout() {
    let out = run(&["grad-check"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn generate_train_eval_roundtrip() {
    let started = Instant::now();
    let dir = work_dir("roundtrip");
    let ds = dir.join("ds");
    let out_dir = dir.join("out");
    let config = write_toy_config(&dir, 3);

    let out = run(&[
        "--seed",
        "7",
        "gen-synth",
        "--out",
        ds.to_str().unwrap(),
        "--train",
        "24",
        "--valid",
        "8",
        "--test",
        "8",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ds.join("manifest.json").exists());
    assert!(ds.join("train.bin").exists());

    let out = run(&[
        "--out-dir",
        out_dir.to_str().unwrap(),
        "train",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = out_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(out_dir.join("train_log.csv").exists());
    assert!(out_dir.join("amr_probe.csv").exists());

    let out = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("micro-F1"));

    // exports from the trained checkpoint
    let out = run(&[
        "--out-dir",
        out_dir.to_str().unwrap(),
        "export-correlations",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("correlations_head0.csv").exists());
    assert!(out_dir.join("correlations_head1.csv").exists());

    let out = run(&[
        "--out-dir",
        out_dir.to_str().unwrap(),
        "export-embeddings",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--count",
        "3",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let emb = fs::read(out_dir.join("embeddings.bin")).unwrap();
    assert_eq!(&emb[..8], b"MMEREMB1");

    // precision mismatch between checkpoint and flag is a contract error
    let out = run(&[
        "--precision",
        "f32",
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--precision"));

    assert!(
        started.elapsed().as_secs() < 600,
        "end-to-end round trip must finish within 10 minutes"
    );
}

#[test]
fn f32_precision_trains_and_evaluates() {
    let dir = work_dir("f32");
    let ds = dir.join("ds");
    let out_dir = dir.join("out");
    let config = write_toy_config(&dir, 2);
    assert_eq!(
        code(&run(&[
            "--seed",
            "9",
            "gen-synth",
            "--out",
            ds.to_str().unwrap(),
            "--train",
            "16",
            "--valid",
            "6",
            "--test",
            "6",
        ])),
        0
    );
    let out = run(&[
        "--precision",
        "f32",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "train",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "--precision",
        "f32",
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        ds.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
        "--split",
        "valid",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
