#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gvse_cli::config::ExperimentConfig;

/// Six classes at 16x16 with a two-block backbone; trains in seconds.
pub const SMALL: &str = r#"{
  "seed": 3,
  "data": {
    "source": {"synthetic": {"num_classes": 6, "num_unseen": 2, "num_attributes": 8,
                             "image_size": 16, "samples_per_class": 6, "groups": 2}},
    "test_fraction": 0.2
  },
  "embedding": {"dim": 4},
  "model": {
    "input_height": 16, "input_width": 16,
    "blocks": [{"in_channels": 3, "out_channels": 4, "stride": 1},
               {"in_channels": 4, "out_channels": 8, "stride": 2}],
    "gcn_hidden": 8, "node_dim": 4, "latent_dim": 4
  },
  "train": {"epochs": 2, "batch_size": 8}
}"#;

pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(SMALL).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Writes `cfg` next to its outputs and returns the path.
pub fn write_config(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

pub fn gvse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvse"))
        .args(args)
        .env("GVSE_LOG", "error")
        .output()
        .expect("binary runs")
}
