//! Run configuration shared by every CLI command.
//!
//! Values are resolved as built-in defaults, then a JSON file, then
//! `section.key=value` overrides. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{read_json, write_json};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{SamplerConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::metrics::{AutoencoderConfig, MotionBeatConfig, DEFAULT_SIGMA_BC, MAX_DIVERSITY_PAIRS};
use crate::tps::DEFAULT_LAMBDA;
use crate::trainer::{SyntheticConfig, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sigma_bc: f64,
    pub max_pairs: usize,
    pub seed: u64,
    pub motion: MotionBeatConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma_bc: DEFAULT_SIGMA_BC,
            max_pairs: MAX_DIVERSITY_PAIRS,
            seed: 0,
            motion: MotionBeatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreviewConfig {
    pub lambda: f64,
    /// Canvas size used when no source image is given.
    pub width: usize,
    pub height: usize,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            width: 256,
            height: 256,
        }
    }
}

/// Every module's settings under its own key.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub generate: GenerateConfig,
    pub autoencoder: AutoencoderConfig,
    pub eval: EvalConfig,
    pub preview: PreviewConfig,
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::Config(format!("unknown key '{p}'"))),
                }
            }
            Ok(())
        }
        (Value::Object(_), _) => Err(Error::Config(format!("'{path}' must be an object"))),
        (b, o) => {
            if o.is_object() && !b.is_null() {
                return Err(Error::Config(format!("'{path}' is not a section")));
            }
            *b = o;
            Ok(())
        }
    }
}

impl RunConfig {
    fn to_value(self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a (possibly partial) JSON document on top of `self`.
    pub fn merged(self, over: Value) -> Result<Self> {
        let mut base = self.to_value();
        merge(&mut base, over, "")?;
        Self::from_value(base)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let v: Value = read_json(path)?;
        Self::default()
            .merged(v)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `a.b.c=value` override. The value is read as JSON when it
    /// parses and as a plain string otherwise.
    pub fn with_override(self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("bad override key '{key}'")));
        }
        let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        for part in key.rsplit('.') {
            let mut obj = serde_json::Map::new();
            obj.insert(part.to_string(), value);
            value = Value::Object(obj);
        }
        self.merged(value)
    }

    /// Defaults, then `file`, then each override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        Ok(cfg)
    }

    /// Copies the quantities the model shares with training and the data so
    /// they cannot disagree.
    pub fn sync_model(&mut self, num_keypoints: usize) {
        let m = &mut self.model;
        let t = &self.train;
        if m.num_frames != t.num_frames || m.num_init != t.num_init || m.prediction_mode != t.prediction_mode {
            log::warn!("model.num_frames/num_init/prediction_mode follow the train section");
        }
        m.num_frames = t.num_frames;
        m.num_init = t.num_init;
        m.prediction_mode = t.prediction_mode;
        m.num_keypoints = num_keypoints;
        self.autoencoder.num_frames = t.num_frames;
        self.autoencoder.frame_dim = 2 * num_keypoints;
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(RESOLVED_CONFIG_FILE), self)
    }
}
