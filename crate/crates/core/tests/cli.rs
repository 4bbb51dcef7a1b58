//! The `etg` binary: exit codes, config handling and the recording command.

use std::path::Path;
use std::process::Command;

fn etg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_etg"));
    c.env_remove("ETG_CONFIG");
    c
}

fn code(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(etg().arg("frobnicate")), 2);
    assert_eq!(code(&mut etg()), 2);
    assert_eq!(code(etg().arg("--help")), 0);
    assert_eq!(code(etg().args(["sim", "--help"])), 0);
    assert_eq!(
        code(etg().args(["train", "steering", "--out", "/nonexistent/x.json"])),
        2,
        "missing --tub"
    );
    assert_eq!(
        code(etg().args(["sim", "--track", "moebius", "--out", "/tmp/unused"])),
        2,
        "unknown preset"
    );
}

#[test]
fn unknown_config_key_is_rejected_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"loop": {"loop_hz": 25, "turbo": 1}}"#).unwrap();
    let out = etg()
        .env("ETG_CONFIG", &cfg)
        .args(["sim", "--seconds", "1", "--out"])
        .arg(dir.path().join("tub"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("turbo"));
}

fn count(dir: &Path, prefix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with(prefix)
        })
        .count()
}

#[test]
fn sim_records_one_record_per_tick_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"camera": {"width": 32, "height": 32}, "seed": 1}"#,
    )
    .unwrap();
    let tub = dir.path().join("tub");
    let out = etg()
        .args([
            "sim",
            "--track",
            "oval",
            "--driver",
            "expert",
            "--seconds",
            "60",
            "--seed",
            "42",
            "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&tub)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(count(&tub, "record_"), 1500);
    assert_eq!(count(&tub, "frame_"), 1500);
    let echoed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tub.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 42, "flag overrides file");
    assert_eq!(echoed["camera"]["width"], 32, "file overrides default");
    assert_eq!(echoed["loop"]["loop_hz"], 25.0);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tub.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ticks"], 1500);
    assert_eq!(summary["tub_records"], 1500);

    assert_eq!(
        code(etg().args(["sim", "--seconds", "1", "--out"]).arg(&tub)),
        1,
        "refuses to overwrite an existing tub"
    );
}
