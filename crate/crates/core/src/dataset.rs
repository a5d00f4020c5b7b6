//! On-disk clip format.
//!
//! ```text
//! dataset/
//!   stats.json              {"mean": [2K], "std": [2K]}
//!   clip_0000/
//!     manifest.json         {id, fps, num_frames, num_keypoints, features_hash?}
//!     keypoints.bin         f32 LE, [frame][keypoint][x, y]
//!     audio.wav
//!     features.bin          optional f32 LE cache, num_frames x 32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{extract_features_range, load_wav, write_wav, FeatureConfig};
use crate::error::{Error, Result};
use crate::types::{compute_stats, GestureClip, KeypointSequence, NormalizationStats};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const KEYPOINTS_FILE: &str = "keypoints.bin";
pub const AUDIO_FILE: &str = "audio.wav";
pub const FEATURES_FILE: &str = "features.bin";
pub const STATS_FILE: &str = "stats.json";
pub const DRIVING_FILE: &str = "driving.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub num_keypoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_hash: Option<String>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes one clip directory; keypoints are stored as f32.
pub fn write_clip(dir: &Path, clip: &GestureClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kp = &clip.keypoints;
    let manifest = ClipManifest {
        id: clip.id.clone(),
        fps: kp.fps(),
        num_frames: kp.len(),
        num_keypoints: kp.num_keypoints(),
        features_hash: None,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let path = dir.join(KEYPOINTS_FILE);
    fs::write(&path, f32_bytes(kp.as_array().iter().copied())).map_err(|e| Error::io(&path, e))?;
    write_wav(dir.join(AUDIO_FILE), &clip.audio)
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_clip(dir: &Path) -> Result<GestureClip> {
    let manifest = read_manifest(dir)?;
    let values = read_f32(&dir.join(KEYPOINTS_FILE))?;
    let expected = manifest.num_frames * manifest.num_keypoints * 2;
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "{}: {} values, manifest implies {expected}",
            dir.join(KEYPOINTS_FILE).display(),
            values.len()
        )));
    }
    let data = Array2::from_shape_vec((manifest.num_frames, 2 * manifest.num_keypoints), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(GestureClip {
        id: manifest.id,
        keypoints: KeypointSequence::from_array(data, manifest.fps)?,
        audio: load_wav(dir.join(AUDIO_FILE))?,
    })
}

pub fn read_stats(path: &Path) -> Result<NormalizationStats> {
    read_json(path)
}

pub fn write_stats(path: &Path, stats: &NormalizationStats) -> Result<()> {
    write_json(path, stats)
}

/// Clip directories in lexicographic order.
pub fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<GestureClip>,
    pub dirs: Vec<PathBuf>,
    pub stats: NormalizationStats,
}

/// Loads every clip under `root`. Uses `stats.json` when present and
/// computes stats from the clips otherwise.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let dirs = clip_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clips = dirs.iter().map(|d| read_clip(d)).collect::<Result<Vec<_>>>()?;
    let stats_path = root.join(STATS_FILE);
    let stats = if stats_path.is_file() {
        read_stats(&stats_path)?
    } else {
        let seqs: Vec<_> = clips.iter().map(|c| c.keypoints.clone()).collect();
        compute_stats(&seqs)?
    };
    if let Some(c) = clips.iter().find(|c| c.keypoints.num_keypoints() != stats.num_keypoints()) {
        return Err(Error::KeypointMismatch {
            expected: stats.num_keypoints(),
            found: c.keypoints.num_keypoints(),
        });
    }
    Ok(Dataset { clips, dirs, stats })
}

/// Writes clips as `clip_0000`, `clip_0001`, ... plus `stats.json`.
pub fn write_dataset(root: &Path, clips: &[GestureClip]) -> Result<NormalizationStats> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, clip) in clips.iter().enumerate() {
        write_clip(&root.join(format!("clip_{i:04}")), clip)?;
    }
    let seqs: Vec<_> = clips.iter().map(|c| c.keypoints.clone()).collect();
    let stats = compute_stats(&seqs)?;
    write_stats(&root.join(STATS_FILE), &stats)?;
    Ok(stats)
}

/// Content hash of the audio samples and feature settings.
pub fn features_hash(clip: &GestureClip, num_frames: usize, cfg: &FeatureConfig) -> String {
    let mut h = Sha256::new();
    h.update(clip.audio.sample_rate.to_le_bytes());
    for s in &clip.audio.samples {
        h.update(s.to_le_bytes());
    }
    h.update((num_frames as u64).to_le_bytes());
    h.update(serde_json::to_vec(cfg).expect("feature config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Whole-clip audio features, computed in f64 and never read from cache.
pub fn clip_features(clip: &GestureClip, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    Ok(extract_features_range(&clip.audio, 0, clip.keypoints.len(), cfg)?.features)
}

/// Whole-clip features through the `features.bin` cache in `dir`.
///
/// The cache is f32, so values read back are rounded to single precision.
/// A stale or missing cache is recomputed and the manifest hash updated.
pub fn cached_clip_features(dir: &Path, clip: &GestureClip, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    let n = clip.keypoints.len();
    let hash = features_hash(clip, n, cfg);
    let mut manifest = read_manifest(dir)?;
    let path = dir.join(FEATURES_FILE);
    if manifest.features_hash.as_deref() == Some(hash.as_str()) && path.is_file() {
        let values = read_f32(&path)?;
        if values.len() == n * cfg.num_bins {
            return Array2::from_shape_vec((n, cfg.num_bins), values).map_err(|e| Error::Shape(e.to_string()));
        }
        log::warn!("{}: cache size mismatch, recomputing", path.display());
    }
    let feats = clip_features(clip, cfg)?;
    fs::write(&path, f32_bytes(feats.iter().copied())).map_err(|e| Error::io(&path, e))?;
    manifest.features_hash = Some(hash);
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(feats.mapv(|v| v as f32 as f64))
}

/// Keypoint export consumed by external renderers and the preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingFile {
    pub fps: f64,
    #[serde(rename = "K")]
    pub num_keypoints: usize,
    pub frames: Vec<Vec<[f64; 2]>>,
}

impl DrivingFile {
    pub fn from_sequence(seq: &KeypointSequence) -> Self {
        Self {
            fps: seq.fps(),
            num_keypoints: seq.num_keypoints(),
            frames: seq.frames().into_iter().map(|f| f.coords).collect(),
        }
    }

    pub fn to_sequence(&self) -> Result<KeypointSequence> {
        if let Some(f) = self.frames.iter().find(|f| f.len() != self.num_keypoints) {
            return Err(Error::KeypointMismatch {
                expected: self.num_keypoints,
                found: f.len(),
            });
        }
        let frames: Vec<_> = self
            .frames
            .iter()
            .map(|f| crate::types::KeypointFrame::new(f.clone()))
            .collect();
        KeypointSequence::from_frames(&frames, self.fps)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;

    fn clip(id: &str, n: usize, k: usize) -> GestureClip {
        let data = Array2::from_shape_fn((n, 2 * k), |(i, j)| 0.25 + 0.01 * i as f64 + 0.001 * j as f64);
        let samples = (0..(n as f64 / 25.0 * 16000.0) as usize)
            .map(|i| crate::audio::quantize_pcm16((i as f64 * 0.05).sin() * 0.3))
            .collect();
        GestureClip {
            id: id.into(),
            keypoints: KeypointSequence::from_array(data.mapv(|v| v as f32 as f64), 25.0).unwrap(),
            audio: Waveform::new(samples, 16000).unwrap(),
        }
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip("a", 40, 3);
        write_clip(dir.path(), &c).unwrap();
        let back = read_clip(dir.path()).unwrap();
        assert_eq!(back.id, "a");
        assert_eq!(back.keypoints, c.keypoints);
        assert_eq!(back.audio.samples, c.audio.samples);
        let bytes = fs::metadata(dir.path().join(KEYPOINTS_FILE)).unwrap().len();
        assert_eq!(bytes, 40 * 3 * 2 * 4);
    }

    #[test]
    fn truncated_keypoints_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), &clip("a", 10, 2)).unwrap();
        fs::write(dir.path().join(KEYPOINTS_FILE), vec![0u8; 12]).unwrap();
        assert!(matches!(read_clip(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let clips = vec![clip("x", 30, 2), clip("y", 35, 2)];
        let stats = write_dataset(dir.path(), &clips).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.clips.len(), 2);
        assert_eq!(ds.clips[0].id, "x");
        assert_eq!(ds.clips[1].id, "y");
        assert_eq!(ds.stats, stats);
        assert!(matches!(
            load_dataset(tempfile::tempdir().unwrap().path()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn feature_cache_hits_and_invalidates() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip("a", 20, 2);
        write_clip(dir.path(), &c).unwrap();
        let cfg = FeatureConfig::default();
        let first = cached_clip_features(dir.path(), &c, &cfg).unwrap();
        let hash = read_manifest(dir.path()).unwrap().features_hash.unwrap();
        assert_eq!(hash.len(), 64);
        let second = cached_clip_features(dir.path(), &c, &cfg).unwrap();
        assert_eq!(first, second);
        let direct = clip_features(&c, &cfg).unwrap();
        for (a, b) in first.iter().zip(direct.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // changed audio produces a different key
        let mut other = c.clone();
        other.audio = other.audio.scaled(0.5);
        assert_ne!(features_hash(&other, 20, &cfg), hash);
        let third = cached_clip_features(dir.path(), &other, &cfg).unwrap();
        assert_ne!(third, first);
    }

    #[test]
    fn driving_file_shape() {
        let seq = clip("a", 3, 2).keypoints;
        let d = DrivingFile::from_sequence(&seq);
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["K"], 2);
        assert_eq!(v["frames"].as_array().unwrap().len(), 3);
        assert_eq!(v["frames"][0].as_array().unwrap().len(), 2);
        assert_eq!(d.to_sequence().unwrap(), seq);
    }
}
