#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json_lines(&self) -> Vec<Value> {
        self.stdout
            .lines()
            .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad JSON line {l:?}: {e}")))
            .collect()
    }

    pub fn json(&self) -> Value {
        let mut v = self.json_lines();
        assert_eq!(v.len(), 1, "expected one JSON line, got {:?}", self.stdout);
        v.pop().unwrap()
    }
}

pub fn arnet(args: &[&str]) -> Run {
    arnet_in(None, args)
}

/// Run with `ARNET_DATA_ROOT` set to `root` (or unset).
pub fn arnet_in(root: Option<&Path>, args: &[&str]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_arnet"));
    cmd.args(args).env_remove("ARNET_DATA_ROOT");
    if let Some(r) = root {
        cmd.env("ARNET_DATA_ROOT", r);
    }
    let out: Output = cmd.output().expect("spawn arnet");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

pub fn ok(args: &[&str]) -> Run {
    let r = arnet(args);
    assert_eq!(r.code, 0, "arnet {args:?} failed: {}", r.stderr);
    r
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny copy corpus that a small model memorizes in well under a second.
pub fn copy_corpus(dir: &Path, name: &str, size: usize, seed: u64) -> PathBuf {
    let prefix = dir.join(name);
    ok(&[
        "gen-data", "--kind", "copy", "--size", &size.to_string(), "--seed", &seed.to_string(),
        "--vocab", "6", "--max-len", "6", "--out", s(&prefix),
    ]);
    prefix
}

pub fn write_config(dir: &Path, train: &Path, extra: &str) -> PathBuf {
    let p = dir.join("experiment.cfg");
    let text = format!(
        "# smoke config\ntask = copy-toy\ntrain = {}\nemb_dim = 16\nhidden_dim = 32\nbatch_size = 8\nmax_len = 8\n{extra}",
        train.display()
    );
    fs::write(&p, text).unwrap();
    p
}

/// Random 28x28 digits written as an IDX pair at `{dir}/{name}`.
pub fn idx_digits(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    use arnet_core::pmnist::{encode_idx_images, encode_idx_labels, idx_paths};
    let mut rng = arnet_core::tensor::RngStream::new(seed);
    let images: Vec<Vec<u8>> = (0..n).map(|_| (0..784).map(|_| rng.below(256) as u8).collect()).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let prefix = dir.join(name);
    let (i, l) = idx_paths(&prefix);
    fs::write(i, encode_idx_images(28, 28, &images)).unwrap();
    fs::write(l, encode_idx_labels(&labels)).unwrap();
    prefix
}

pub fn pmnist_config(dir: &Path, train: &Path, extra: &str) -> PathBuf {
    let p = dir.join("pmnist.cfg");
    let text = format!(
        "task = pmnist\ntrain = {}\nhidden_dim = 4\nbatch_size = 4\nval_size = 4\npermutation_seed = 9\n{extra}",
        train.display()
    );
    fs::write(&p, text).unwrap();
    p
}
