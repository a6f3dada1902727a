#![allow(dead_code)]

use std::path::{Path, PathBuf};

use audio_jepa::commands::{self, ConfigArgs, PretrainArgs, SynthArgs};
use audio_jepa::manifest::Manifest;

/// Small enough for a few steps per second: 16 patches per clip.
pub const TINY: &str = "\
seed = 11
[audio]
sample_rate = 8000
duration = 1.0
n_mels = 64
n_time_bins = 64
[encoder]
embed_dim = 32
depth = 2
num_heads = 4
[predictor]
embed_dim = 16
depth = 1
num_heads = 2
[train]
batch_size = 8
total_steps = 20
warmup_steps = 5
checkpoint_every = 10
";

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

pub fn config_args(path: &Path, sets: &[&str]) -> ConfigArgs {
    ConfigArgs {
        config: Some(path.to_path_buf()),
        sets: sets.iter().map(|s| s.to_string()).collect(),
        seed: None,
    }
}

/// Synthetic corpus under `dir/data`; returns the manifest path.
pub fn corpus(dir: &Path, config: &Path, train: usize, test: usize) -> PathBuf {
    let out = dir.join("data");
    commands::synth_data(&SynthArgs {
        config: config_args(config, &[]),
        out: out.clone(),
        train_per_class: train,
        test_per_class: test,
    })
    .unwrap();
    out.join("manifest.csv")
}

pub fn pretrain_args(config: &Path, manifest: &Path, out: &Path, sets: &[&str]) -> PretrainArgs {
    PretrainArgs {
        config: config_args(config, sets),
        manifest: Some(manifest.to_path_buf()),
        out: Some(out.to_path_buf()),
        resume: None,
        progress_every: 0,
    }
}

pub fn manifest(path: &Path) -> Manifest {
    Manifest::read(path).unwrap()
}
