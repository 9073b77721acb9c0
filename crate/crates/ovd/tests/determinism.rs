//! Fixture generation and detection are reproducible.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{blessing, data_dir, micro_spec};
use ovd::synth::generate;

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa, fb);
    for f in fa {
        assert!(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn same_seed_gives_byte_identical_bundles() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = micro_spec();
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    assert_same_tree(a.path(), b.path());
}

#[test]
fn committed_micro_bundle_regenerates_exactly() {
    if blessing() {
        return;
    }
    let a = tempfile::tempdir().unwrap();
    generate(&micro_spec(), a.path()).unwrap();
    assert_same_tree(a.path(), &data_dir().join("micro"));
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut spec = micro_spec();
    generate(&spec, a.path()).unwrap();
    spec.seed += 1;
    generate(&spec, b.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("images/1.ovdt")).unwrap(),
        fs::read(b.path().join("images/1.ovdt")).unwrap()
    );
}

#[test]
fn worker_count_does_not_change_detections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("micro/detect.json");
    let mut outputs = Vec::new();
    for workers in ["1", "3", "8"] {
        let out = dir.path().join(format!("d{workers}.json"));
        let r = common::ovd(&["detect", "--config", cfg.to_str().unwrap(), "--workers", workers, "--output", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        outputs.push(fs::read(out).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}
