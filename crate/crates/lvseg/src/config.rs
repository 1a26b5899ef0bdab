//! JSON run configuration. Every section and field is optional and falls back
//! to its default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lvseg_core::crf::CrfParams;
use lvseg_core::detector::DetectorConfig;
use lvseg_core::metrics::{ApdMode, ApdOptions};
use lvseg_core::semflow::SfConfig;
use lvseg_core::synth::SynthConfig;
use lvseg_core::tfcnn::NetworkConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset seed of `synth`; `--seed` also overrides the model seeds.
    pub seed: u64,
    pub subjects: usize,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub detector: DetectorConfig,
    pub crf: CrfParams,
    pub semflow: SfConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            subjects: 20,
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            detector: DetectorConfig::default(),
            crf: CrfParams::default(),
            semflow: SfConfig::default(),
            pipeline: PipelineConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.network.seed = seed;
        self.detector.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Crop each sequence to the LV box before segmentation: the ground-truth
    /// hull while training, the detected hull at inference.
    pub crop: bool,
    /// Pixels added on every side of the box.
    pub crop_margin: usize,
    pub threshold: f64,
    /// Detector training uses every n-th frame.
    pub detector_frame_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { crop: true, crop_margin: 6, threshold: 0.5, detector_frame_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub one_directional: bool,
    /// APD when exactly one mask is empty; the image diagonal when unset.
    pub empty_penalty_mm: Option<f64>,
}

impl MetricsConfig {
    pub fn apd_options(&self, spacing_mm: (f64, f64)) -> ApdOptions {
        ApdOptions {
            spacing_mm,
            mode: if self.one_directional { ApdMode::OneDirectional } else { ApdMode::Symmetric },
            empty_penalty_mm: self.empty_penalty_mm,
        }
    }
}
