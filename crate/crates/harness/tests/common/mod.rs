#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"{
  "data": {"n_train": 24, "n_test": 8},
  "train": {"steps": 4, "batch": 4},
  "theory": {"first_order_samples": 2, "rademacher_samples": 4, "rademacher": {"restarts": 1, "steps": 2}},
  "seeds": [0, 1]
}"#;

pub fn m3esr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3esr"))
        .args(args)
        .current_dir(dir)
        .env_remove("M3ESR_THREADS")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = m3esr(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Every file under `root` keyed by its relative path, skipping wall-clock
/// timings.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.csv" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub const PIPELINE: [&[&str]; 6] = [
    &["gen-data"],
    &["train", "--variant", "static"],
    &["exp-svd"],
    &["exp-ablate-modality"],
    &["exp-ablate-module"],
    &["exp-theory"],
];

/// Runs the full command sequence with the tiny config in `dir`, writing
/// under `dir/o`, and returns the concatenated stdout.
pub fn pipeline(dir: &Path) -> String {
    write_config(dir, "tiny.json", TINY);
    PIPELINE
        .iter()
        .map(|cmd| {
            let mut args = vec!["--config", "tiny.json", "--out", "o"];
            args.extend_from_slice(cmd);
            ok(dir, &args)
        })
        .collect()
}
