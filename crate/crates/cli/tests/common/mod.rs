#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn tryon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tryon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning tryon")
}

/// Runs a command that must succeed and returns its stderr.
pub fn ok(args: &[&str]) -> String {
    let out = tryon(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "tryon {args:?} failed: {stderr}");
    stderr
}

pub fn code(args: &[&str]) -> i32 {
    tryon(args).status.code().expect("terminated by signal")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// `(path, sha256)` pairs of a run record's outputs.
pub fn output_hashes(record: &Path) -> Vec<(String, String)> {
    json(record)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| (o["path"].as_str().unwrap().to_owned(), o["sha256"].as_str().unwrap().to_owned()))
        .collect()
}
