use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: &str = r#"{"pretrain":{"epochs":1},"adapter":{"epochs":1},"pretrain_samples":64}"#;

fn pemcompose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pemcompose"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.json"), FAST).unwrap();
    dir
}

fn adapters(dir: &Path, out: &str, seed_model: &str, traits: &[&str]) {
    let o = pemcompose(dir, &["pretrain", "--config", "fast.json", "--seed-model", seed_model, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in traits {
        let base = format!("{out}/base.pem.bin");
        let o = pemcompose(
            dir,
            &["train", "--config", "fast.json", "--base", &base, "--trait", t, "--kind", "lora", "--out", out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

#[test]
fn compose_rejects_wrong_weight_count() {
    let dir = setup();
    adapters(dir.path(), "a", "0", &["E", "N", "T", "J"]);
    let o = pemcompose(
        dir.path(),
        &[
            "compose", "--adapters", "a/lora_E.pem.bin", "a/lora_N.pem.bin", "a/lora_T.pem.bin", "a/lora_J.pem.bin",
            "--weights", "0.5", "0.5", "--out", "c.pem.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().count(), 1);
    assert!(!dir.path().join("c.pem.bin").exists());

    let o = pemcompose(
        dir.path(),
        &[
            "compose", "--adapters", "a/lora_E.pem.bin", "a/lora_N.pem.bin", "a/lora_T.pem.bin", "a/lora_J.pem.bin",
            "--weights", "0.25", "0.25", "0.25", "0.25", "--out", "c.pem.bin",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pemcompose(dir.path(), &["inspect", "c.pem.bin"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("trait: ENTJ"), "{text}");
}

#[test]
fn compose_rejects_adapters_from_different_bases() {
    let dir = setup();
    adapters(dir.path(), "a", "0", &["E", "N", "T", "J"]);
    adapters(dir.path(), "b", "7", &["N"]);
    let o = pemcompose(
        dir.path(),
        &[
            "compose", "--adapters", "a/lora_E.pem.bin", "b/lora_N.pem.bin", "a/lora_T.pem.bin", "a/lora_J.pem.bin",
            "--weights", "0.25", "0.25", "0.25", "0.25", "--out", "c.pem.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("fingerprint mismatch"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_file_and_bad_usage() {
    let dir = setup();
    let o = pemcompose(dir.path(), &["inspect", "missing.pem.bin"]);
    assert_eq!(o.status.code(), Some(3));
    let o = pemcompose(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = pemcompose(dir.path(), &["pipeline", "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(dir.path().join("bad.json"), r#"{"adapter":{"epochs":0}}"#).unwrap();
    let o = pemcompose(dir.path(), &["pretrain", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("junk.pem.bin"), b"not a checkpoint").unwrap();
    let o = pemcompose(dir.path(), &["inspect", "junk.pem.bin"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_is_deterministic() {
    let dir = setup();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = pemcompose(dir.path(), &["pipeline", "--config", "fast.json", "--kind", "ia3", "--out", "r1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(fs::read(dir.path().join("r1/summary.json")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let text = fs::read_to_string(dir.path().join("r1/summary.txt")).unwrap();
    assert!(text.contains("Table 1") && text.contains("Table 2"));
    assert_eq!(text.matches('✓').count() + text.matches('✗').count(), 16);
}
