//! JSON configuration files. Command-line flags override every field.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use poselift::graph::SkeletonSpec;
use poselift::model::{ModelConfig, Variant};
use poselift::train::TrainConfig;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Settings of `poselift synth`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub noise_px: f64,
    pub fps: f64,
    /// Skeleton JSON file; the 17-joint Human3.6M layout when absent.
    pub skeleton: Option<PathBuf>,
    /// Action labels assigned round-robin.
    pub actions: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            eval_sequences: 2,
            frames: 243,
            noise_px: 1.0,
            fps: 50.0,
            skeleton: None,
            actions: ["walk", "wave", "squat", "turn"].map(String::from).to_vec(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        match &self.skeleton {
            Some(p) => Ok(SkeletonSpec::load(p)?),
            None => Ok(SkeletonSpec::h36m()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            bail!("sequences must be positive");
        }
        if self.frames == 0 {
            bail!("frames must be positive");
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            bail!("noise_px must be a finite non-negative number");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            bail!("fps must be positive");
        }
        if self.actions.is_empty() {
            bail!("at least one action label is required");
        }
        Ok(())
    }
}

/// Settings of `poselift train`. A `variant` overrides depth, width and
/// frames of `model`; the default model is variant B.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.model, self.variant) {
            (Some(m), _) => m.clone(),
            (None, Some(v)) => ModelConfig::variant(v),
            (None, None) => ModelConfig::default(),
        };
        if let Some(v) = self.variant {
            let preset = ModelConfig::variant(v);
            (cfg.depth, cfg.dim, cfg.frames) = (preset.depth, preset.dim, preset.frames);
        }
        Ok(cfg)
    }
}

/// Reads either a run configuration (with `model` or `variant`) or a bare model configuration.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let value: serde_json::Value = read_json(path)?;
    let is_run = value.as_object().is_some_and(|o| ["model", "variant", "train"].iter().any(|k| o.contains_key(*k)));
    if is_run {
        let run: RunConfig =
            serde_json::from_value(value).with_context(|| format!("invalid run config {}", path.display()))?;
        run.model_config()
    } else {
        serde_json::from_value(value).with_context(|| format!("invalid model config {}", path.display()))
    }
}
