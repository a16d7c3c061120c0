//! Shared fixture: a tiny config and a full pipeline through every
//! subcommand, run from a working directory with relative paths so that
//! manifests of independent runs are comparable byte for byte.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"{
  "seed": 3,
  "grid": { "n": 64, "fft_pad": 1, "window_px": 21 },
  "eval": { "z_grid": [0.5, 1.0, 1.5], "window_px": 31 },
  "edof": { "range_um": 2.0, "window_px": 31, "options": { "iterations": 6, "checkpoint_every": 2, "lr": 0.05 } },
  "pair": { "options": { "iterations": 3 } },
  "scene": {
    "density_per_um2": 0.1, "fov_um": 4.0, "margin_um": 0.5,
    "z_range_um": [0.2, 1.8], "photons_range": [15000.0, 15000.0]
  },
  "dataset": { "n_examples": 2, "train_fraction": 0.5 },
  "localize": { "bank": { "z_range_um": [0.0, 2.0], "z_step_um": 0.25, "window_px": 21 } },
  "sweep": { "densities_per_um2": [0.1], "n_images": 2 },
  "tracking": { "nucleus": { "n_emitters": 5, "n_frames": 60 }, "link": { "min_pts": 10 } }
}
"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_psfforge")
}

pub fn psfforge(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args).env_remove("PSFFORGE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to start psfforge")
}

/// Registration inputs: an affine map plus 20% outliers.
pub fn write_register_inputs(dir: &Path) {
    let mut a = String::from("x_um,y_um\n");
    let mut b = String::from("x_um,y_um\n");
    for k in 0..50 {
        let (x, y) = ((k * 7 % 50) as f64 * 0.4, (k * 13 % 50) as f64 * 0.4);
        let (u, v) = if k % 5 == 0 {
            ((k * 3 % 17) as f64, (k * 11 % 19) as f64)
        } else {
            (1.01 * x + 0.02 * y + 0.3, -0.01 * x + 0.99 * y - 0.2)
        };
        a.push_str(&format!("{u},{v}\n"));
        b.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(dir.join("beads1.csv"), a).unwrap();
    std::fs::write(dir.join("beads2.csv"), b).unwrap();
}

/// Every subcommand with its arguments, in dependency order. Output goes
/// to a directory named after the step.
pub const PIPELINE: &[(&str, &[&str])] = &[
    ("edof", &["design-edof"]),
    ("pair", &["design-crlb-pair"]),
    ("crlb", &["crlb", "--mask1", "pair/mask1.f32", "--mask2", "pair/mask2.f32"]),
    ("sim", &["simulate", "--mask1", "pair/mask1.f32", "--mask2", "pair/mask2.f32"]),
    ("loc", &["localize", "--bank", "pair/bank.json", "--dataset", "sim/dataset"]),
    ("eval", &["evaluate", "--pred", "loc/locs.csv", "--gt", "sim/dataset/labels.csv"]),
    ("reg", &["register", "--locs1", "beads1.csv", "--locs2", "beads2.csv"]),
    ("warp", &["warp", "--image", "sim/dataset/example_00000_ch2.f32", "--transform", "reg/transform.json"]),
    ("track", &["track", "--synthetic"]),
    ("msd", &["msd", "--tracks", "track/tracks.csv"]),
    ("sweep", &["sweep-density", "--bank", "pair/bank.json"]),
];

/// Run the whole pipeline in `dir`; returns the failing step, if any.
pub fn run_pipeline(dir: &Path, extra: &[&str], env: &[(&str, &str)]) -> Result<(), String> {
    std::fs::write(dir.join("config.json"), SMALL_CONFIG).unwrap();
    write_register_inputs(dir);
    for (out, args) in PIPELINE {
        let mut full: Vec<&str> = args.to_vec();
        full.extend_from_slice(&["--config", "config.json", "--out-dir", out]);
        full.extend_from_slice(extra);
        let o = psfforge(dir, &full, env);
        if !o.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

/// Relative path -> bytes of every file below `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
