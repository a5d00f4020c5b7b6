//! Binary checkpoint container.
//!
//! ```text
//! magic   8 bytes  "GDIFFCKP"
//! version u32 LE
//! hlen    u64 LE
//! header  hlen bytes of JSON (configs, stats, tensor table, optimizer scalars)
//! params  f64 LE x num_params
//! adam m  f64 LE x num_params   (only when the header has an optimizer)
//! adam v  f64 LE x num_params
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, FeatureNorm};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSpec};
use crate::trainer::TrainConfig;
use crate::types::NormalizationStats;

pub const MAGIC: &[u8; 8] = b"GDIFFCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    denoiser: DenoiserConfig,
    schedule: ScheduleSpec,
    stats: NormalizationStats,
    audio_norm: FeatureNorm,
    tensors: Vec<ParamSpec>,
    num_params: usize,
    step: u64,
    #[serde(default)]
    optimizer: Option<Adam>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// Everything needed to sample from, or resume training of, a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleSpec,
    pub stats: NormalizationStats,
    pub step: u64,
    pub optimizer: Option<Adam>,
    pub train: Option<TrainConfig>,
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f64s(bytes: &[u8], n: usize) -> Vec<f64> {
    bytes[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            denoiser: *self.model.config(),
            schedule: self.schedule,
            stats: self.stats.clone(),
            audio_norm: self.model.audio_norm().clone(),
            tensors: self.model.params().specs().to_vec(),
            num_params: self.model.num_params(),
            step: self.step,
            optimizer: self.optimizer.clone(),
            train: self.train,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        push_f64s(&mut buf, self.model.params().values());
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.model.num_params() || opt.v.len() != self.model.num_params() {
                return Err(Error::Checkpoint("optimizer state does not match parameter count".into()));
            }
            push_f64s(&mut buf, &opt.m);
            push_f64s(&mut buf, &opt.v);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(path, &format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| corrupt(path, "truncated"))?;
        if body.len() < hlen {
            return Err(corrupt(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json(path, e))?;
        let data = &body[hlen..];
        let n = header.num_params;
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        if data.len() != blocks * n * 8 {
            return Err(corrupt(
                path,
                &format!("expected {} data bytes, found {}", blocks * n * 8, data.len()),
            ));
        }
        let mut model = Denoiser::new(header.denoiser, 0)?;
        if model.params().specs() != header.tensors.as_slice() || model.num_params() != n {
            return Err(corrupt(path, "tensor table does not match the model configuration"));
        }
        model
            .params_mut()
            .load_values(take_f64s(data, n))
            .map_err(|e| corrupt(path, &e))?;
        model.set_audio_norm(header.audio_norm)?;
        let optimizer = header.optimizer.map(|mut opt| {
            opt.m = take_f64s(&data[n * 8..], n);
            opt.v = take_f64s(&data[2 * n * 8..], n);
            opt
        });
        Ok(Self {
            model,
            schedule: header.schedule,
            stats: header.stats,
            step: header.step,
            optimizer,
            train: header.train,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
