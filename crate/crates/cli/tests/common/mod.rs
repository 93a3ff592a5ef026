#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn caac(args: &[&str]) -> Output {
    caac_env(args, &[])
}

pub fn caac_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caac"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("caac binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        stderr(out)
    );
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// A small run config: 10/2/2 scenes of 32×32, two epochs.
pub const SMOKE_CONFIG: &str = r#"{
  "data": { "n_train": 10, "n_val": 2, "n_test": 2 },
  "train": { "epochs": 2, "batch_size": 4 }
}"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

/// Generates the smoke dataset into `dir/data` and returns that directory.
pub fn smoke_data(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, SMOKE_CONFIG);
    let data = dir.join("data");
    assert_ok(&caac(&["gen-data", "--config", p(&cfg), "--out", p(&data)]));
    (cfg, data)
}
