#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn micro_spec() -> ovd::synth::SynthSpec {
    ovd::coco::read_json(&data_dir().join("micro_spec.json")).unwrap()
}

pub fn micro_manifest() -> PathBuf {
    data_dir().join("micro/manifest.json")
}

pub fn blessing() -> bool {
    std::env::var_os("OVD_BLESS").is_some()
}

/// Compare `actual` with the committed golden file, or rewrite the file when
/// `OVD_BLESS` is set.
pub fn check_golden(name: &str, actual: &[u8]) {
    let path = data_dir().join(name);
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with OVD_BLESS=1 to create)", path.display()));
    assert!(expected == actual, "{} differs from the golden file", path.display());
}

pub fn ovd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovd")).args(args).output().unwrap()
}

/// Parse the single-line JSON error a failing command prints.
pub fn error_class(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.trim();
    assert_eq!(line.lines().count(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}
