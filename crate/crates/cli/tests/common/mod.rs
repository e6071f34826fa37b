#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctxprune"));
    c.env_remove("CTXPRUNE_OUT");
    c
}

/// Runs a command in `dir` and returns its output.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn ctxprune")
}

pub fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny configs for every command, written into `dir`.
pub fn write_tiny_configs(dir: &Path) {
    let files = [
        (
            "data.toml",
            "[data]\nn_v = 24\nm = 4\nclasses = 4\npatch_dim = 12\ntrain = 48\nval = 16\ntest = 16\n",
        ),
        ("base.toml", "data_dir = \"data\"\npreset = \"tiny\"\n[train]\nmax_steps = 6\n"),
        (
            "s1.toml",
            "data_dir = \"data\"\nlvlm = \"base/lvlm.ckpt\"\n[train]\nstage = 1\nmax_steps = 4\nguidance_layer = 1\n",
        ),
        (
            "s2.toml",
            "data_dir = \"data\"\nlvlm = \"base/lvlm.ckpt\"\nclassifier = \"s1/classifier.ckpt\"\n[train]\nstage = 2\nmax_steps = 3\nguidance_layer = 1\nhist_every = 1\n",
        ),
        (
            "eval.toml",
            "data_dir = \"data\"\nlvlm = \"base/lvlm.ckpt\"\nclassifier = \"s2/classifier.ckpt\"\nratios = [0.5, 0.25]\n",
        ),
        (
            "sweep.toml",
            "data_dir = \"data\"\nlvlm = \"base/lvlm.ckpt\"\nclassifier = \"s2/classifier.ckpt\"\n[bench]\nreps = 1\nwarmup = 0\ndecode_tokens = 2\n",
        ),
        (
            "bench.toml",
            "lvlm = \"base/lvlm.ckpt\"\nclassifier = \"s2/classifier.ckpt\"\nn_v = [24, 40]\n[bench]\nreps = 1\nwarmup = 0\ndecode_tokens = 2\n",
        ),
        ("prelim.toml", "data_dir = \"data\"\nlvlm = \"base/lvlm.ckpt\"\n"),
        ("grad.toml", "samples = 20\n"),
    ];
    for (name, text) in files {
        fs::write(dir.join(name), text).unwrap();
    }
}

/// Every command in dependency order: (command, config, output).
pub const PIPELINE: [(&str, &str, &str); 9] = [
    ("gen-data", "data.toml", "data"),
    ("train-base", "base.toml", "base"),
    ("train-stage1", "s1.toml", "s1"),
    ("train-stage2", "s2.toml", "s2"),
    ("eval", "eval.toml", "ev"),
    ("sweep", "sweep.toml", "sw"),
    ("bench", "bench.toml", "be"),
    ("repro-prelim", "prelim.toml", "pr"),
    ("grad-check", "grad.toml", "gc"),
];

pub fn run_pipeline(dir: &Path) {
    write_tiny_configs(dir);
    for (cmd, cfg, out) in PIPELINE {
        ok(dir, &[cmd, "--config", cfg, "--out", out]);
    }
}

pub fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

pub fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}
