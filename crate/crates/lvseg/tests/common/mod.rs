#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;

pub fn lvseg(args: &[&str]) -> Result<()> {
    let mut all = vec!["lvseg"];
    all.extend_from_slice(args);
    lvseg::cli::run(all)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small configuration for fast end-to-end runs.
pub const TINY: &str = r#"{
  "subjects": 1,
  "synth": {"frames": 3, "height": 24, "width": 24, "radius_min": 4.0, "radius_max": 5.0,
            "ring_width": 1.5, "speckle_radius": [0.5, 1.0], "distractors": 1},
  "network": {"depth": 2, "base_channels": 2, "input_size": [16, 16], "epochs": 2},
  "detector": {"input_size": [16, 16], "base_channels": 2, "epochs": 3},
  "crf": {"w_app": 1.0, "sigma_p_app": 1.0, "w_smooth": 0.0},
  "semflow": {"outer_iters": 2},
  "pipeline": {"crop_margin": 3}
}"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir`, relative and sorted, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs synth, both trainings, and all eight inference/refinement/eval chains
/// under `root`; returns the eval directories in report order and the report
/// directory.
pub fn full_pipeline(root: &Path, config: &Path, split: &str) -> (Vec<PathBuf>, PathBuf) {
    let c = p(config);
    let r = |name: &str| root.join(name);
    let data = r("data");
    lvseg(&["--config", c, "synth", "--out", p(&r("data"))]).unwrap();
    lvseg(&["--config", c, "train-detector", "--data", p(&r("data")), "--out", p(&r("det"))]).unwrap();
    let mut evals = Vec::new();
    let mut stages: Vec<(String, PathBuf)> = Vec::new();
    for (net, flag) in [("fcnn", true), ("tfcnn", false)] {
        let model = r(&format!("{}-model", net));
        let mut args = vec!["--config", c, "train", "--data", p(&data), "--out", p(&model)];
        if flag {
            args.push("--fcnn");
        }
        lvseg(&args).unwrap();
        let inf = r(&format!("{}-infer", net));
        lvseg(&["--config", c, "infer", "--data", p(&r("data")), "--model", p(&model), "--detector", p(&r("det")), "--out", p(&inf), "--split", split, "--overlay"]).unwrap();
        let crf = r(&format!("{}-crf", net));
        lvseg(&["--config", c, "refine-crf", "--input", p(&inf), "--out", p(&crf)]).unwrap();
        let sf = r(&format!("{}-sf", net));
        lvseg(&["--config", c, "refine-sf", "--input", p(&inf), "--out", p(&sf)]).unwrap();
        let crfsf = r(&format!("{}-crf-sf", net));
        lvseg(&["--config", c, "refine-sf", "--input", p(&crf), "--out", p(&crfsf)]).unwrap();
        stages.extend([inf, crf, sf, crfsf].into_iter().map(|d| (net.to_string(), d)));
    }
    for (_, d) in &stages {
        let e = d.with_file_name(format!("{}-eval", d.file_name().unwrap().to_str().unwrap()));
        lvseg(&["--config", c, "eval", "--input", p(d), "--out", p(&e)]).unwrap();
        evals.push(e);
    }
    let report = r("report");
    let mut args = vec!["report", "--out", p(&report), "--runs"];
    args.extend(evals.iter().map(|e| p(e)));
    lvseg(&args).unwrap();
    (evals, report)
}
