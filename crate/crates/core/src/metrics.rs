//! Gesture metrics: diversity in an autoencoder feature space and beat
//! consistency between motion pauses and audio onsets.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::BeatList;
use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Adam, Init, Linear, ParamStore};
use crate::types::KeypointSequence;

pub const DEFAULT_SIGMA_BC: f64 = 0.1;
pub const MAX_DIVERSITY_PAIRS: usize = 10_000;

/// Maps one `N x 2K` window to a feature vector.
pub trait FeatureEncoder {
    fn encode(&self, window: ArrayView2<f64>) -> Result<Vec<f64>>;
}

/// Flattens the window; useful as a reference encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl FeatureEncoder for IdentityEncoder {
    fn encode(&self, window: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(window.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_frames: usize,
    pub frame_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of windows held out for the reported validation error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden_dim: 64,
            num_frames: 34,
            frame_dim: 2 * crate::types::DEFAULT_NUM_KEYPOINTS,
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.num_frames == 0 || self.frame_dim == 0 {
            return Err(Error::Config("autoencoder sizes must be positive".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("autoencoder needs batch_size > 0, lr > 0, holdout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Frame-wise encoder with temporal mean pooling, and a decoder that
/// broadcasts the latent over time with a learned per-frame offset.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    params: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec_pos: usize,
    dec2: Linear,
}

struct AeCache {
    x: Array2<f64>,
    u: Array2<f64>,
    pooled: Array2<f64>,
    z: Array2<f64>,
    v: Array2<f64>,
    g: Array2<f64>,
}

/// Reconstruction errors observed while training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderReport {
    pub initial_train_mse: f64,
    pub final_train_mse: f64,
    pub holdout_mse: Option<f64>,
    pub num_train: usize,
    pub num_holdout: usize,
}

#[derive(Serialize, Deserialize)]
struct AutoencoderFile {
    config: AutoencoderConfig,
    params: Vec<f64>,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let (f, h, l) = (cfg.frame_dim, cfg.hidden_dim, cfg.latent_dim);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let enc1 = Linear::new(&mut p, "enc.frame", f, h, inv(f), &mut rng);
        let enc2 = Linear::new(&mut p, "enc.latent", h, l, inv(h), &mut rng);
        let dec1 = Linear::new(&mut p, "dec.latent", l, h, inv(l), &mut rng);
        let dec_pos = p.push("dec.time", &[cfg.num_frames, h], Init::Normal(0.1), &mut rng);
        let dec2 = Linear::new(&mut p, "dec.frame", h, f, inv(h), &mut rng);
        Ok(Self {
            cfg,
            params: p,
            enc1,
            enc2,
            dec1,
            dec_pos,
            dec2,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn stack(&self, windows: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        let (n, f) = (self.cfg.num_frames, self.cfg.frame_dim);
        if let Some(w) = windows.iter().find(|w| w.dim() != (n, f)) {
            return Err(Error::Shape(format!("autoencoder window {:?}, expected {:?}", w.dim(), (n, f))));
        }
        ndarray::concatenate(Axis(0), windows).map_err(|e| Error::Shape(e.to_string()))
    }

    fn encode_stacked(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let p = self.params.values();
        let n = self.cfg.num_frames;
        let b = x.nrows() / n;
        let u = self.enc1.forward(p, x.view());
        let a = u.mapv(gelu);
        let pooled = a
            .into_shape_with_order((b, n, self.cfg.hidden_dim))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("n > 0");
        let z = self.enc2.forward(p, pooled.view());
        (u, pooled, z)
    }

    fn forward(&self, x: Array2<f64>) -> (Array2<f64>, AeCache) {
        let p = self.params.values();
        let (n, h) = (self.cfg.num_frames, self.cfg.hidden_dim);
        let b = x.nrows() / n;
        let (u, pooled, z) = self.encode_stacked(&x);
        let d = self.dec1.forward(p, z.view());
        let pos = ArrayView2::from_shape((n, h), &p[self.dec_pos..self.dec_pos + n * h]).expect("layout");
        let mut v = Array2::zeros((b * n, h));
        for i in 0..b {
            let mut rows = v.slice_mut(s![i * n..(i + 1) * n, ..]);
            rows.assign(&pos);
            rows += &d.row(i);
        }
        let g = v.mapv(gelu);
        let y = self.dec2.forward(p, g.view());
        (
            y,
            AeCache {
                x,
                u,
                pooled,
                z,
                v,
                g,
            },
        )
    }

    fn backward(&self, c: &AeCache, dy: ArrayView2<f64>, grads: &mut [f64]) {
        let p = self.params.values();
        let (n, h) = (self.cfg.num_frames, self.cfg.hidden_dim);
        let b = c.x.nrows() / n;
        let dg = self.dec2.backward(p, c.g.view(), dy, grads);
        let dv = dg * &c.v.mapv(gelu_grad);
        let mut dd = Array2::zeros((b, h));
        for i in 0..b {
            let rows = dv.slice(s![i * n..(i + 1) * n, ..]);
            dd.row_mut(i).assign(&rows.sum_axis(Axis(0)));
            for (dst, src) in grads[self.dec_pos..self.dec_pos + n * h].iter_mut().zip(rows.iter()) {
                *dst += src;
            }
        }
        let dz = self.dec1.backward(p, c.z.view(), dd.view(), grads);
        let dpool = self.enc2.backward(p, c.pooled.view(), dz.view(), grads);
        let mut du = c.u.mapv(gelu_grad);
        for i in 0..b {
            let scaled = dpool.row(i).mapv(|v| v / n as f64);
            let mut rows = du.slice_mut(s![i * n..(i + 1) * n, ..]);
            rows *= &scaled;
        }
        self.enc1.backward_params(c.x.view(), du.view(), grads);
    }

    /// Latent codes, one row per window.
    pub fn encode_batch(&self, windows: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        let x = self.stack(windows)?;
        Ok(self.encode_stacked(&x).2)
    }

    pub fn reconstruct(&self, windows: &[ArrayView2<f64>]) -> Result<Vec<Array2<f64>>> {
        let x = self.stack(windows)?;
        let n = self.cfg.num_frames;
        let (y, _) = self.forward(x);
        Ok((0..windows.len()).map(|i| y.slice(s![i * n..(i + 1) * n, ..]).to_owned()).collect())
    }

    /// Mean squared reconstruction error over `windows`.
    pub fn reconstruction_mse(&self, windows: &[ArrayView2<f64>]) -> Result<f64> {
        let x = self.stack(windows)?;
        let (y, _) = self.forward(x.clone());
        Ok((&y - &x).mapv(|v| v * v).mean().unwrap_or(0.0))
    }

    fn loss_and_grad(&self, windows: &[ArrayView2<f64>]) -> Result<(f64, Vec<f64>)> {
        let x = self.stack(windows)?;
        let (y, cache) = self.forward(x);
        let diff = &y - &cache.x;
        let loss = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
        let dy = diff * (2.0 / y.len() as f64);
        let mut g = vec![0.0; self.params.len()];
        self.backward(&cache, dy.view(), &mut g);
        Ok((loss, g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &AutoencoderFile {
                config: self.cfg,
                params: self.params.values().to_vec(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AutoencoderFile = read_json(path)?;
        let mut ae = Self::new(file.config)?;
        ae.params
            .load_values(file.params)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(ae)
    }
}

impl FeatureEncoder for Autoencoder {
    fn encode(&self, window: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[window])?.row(0).to_vec())
    }
}

/// Seeded Adam training on normalized windows; the last `holdout` fraction
/// (after a seeded shuffle) is kept aside for the reported validation error.
pub fn train_autoencoder(
    windows: &[Array2<f64>],
    cfg: &AutoencoderConfig,
) -> Result<(Autoencoder, AutoencoderReport)> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ae = Autoencoder::new(*cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((windows.len() as f64 * cfg.holdout).floor() as usize).min(windows.len() - 1);
    let (train_idx, hold_idx) = order.split_at(windows.len() - n_hold);
    let train: Vec<_> = train_idx.iter().map(|&i| windows[i].view()).collect();
    let hold: Vec<_> = hold_idx.iter().map(|&i| windows[i].view()).collect();

    let initial = ae.reconstruction_mse(&train)?;
    let mut opt = Adam::new(ae.params.len(), cfg.lr);
    for _ in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let (loss, mut g) = ae.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: opt.step,
                loss,
                diagnostic: "autoencoder training diverged".into(),
            });
        }
        crate::nn::clip_grad_norm(&mut g, 1.0);
        opt.update(ae.params.values_mut(), &g);
    }
    let report = AutoencoderReport {
        initial_train_mse: initial,
        final_train_mse: ae.reconstruction_mse(&train)?,
        holdout_mse: if hold.is_empty() {
            None
        } else {
            Some(ae.reconstruction_mse(&hold)?)
        },
        num_train: train.len(),
        num_holdout: hold.len(),
    };
    Ok((ae, report))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean feature distance between generated and reference windows over all
/// cross pairs, or over `max_pairs` seeded random pairs for large sets.
///
/// The two sets are put in a canonical order first, so swapping the
/// arguments gives the identical result.
pub fn diversity<E: FeatureEncoder + ?Sized>(
    generated: &[ArrayView2<f64>],
    reference: &[ArrayView2<f64>],
    encoder: &E,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fa = generated.iter().map(|w| encoder.encode(*w)).collect::<Result<Vec<_>>>()?;
    let fb = reference.iter().map(|w| encoder.encode(*w)).collect::<Result<Vec<_>>>()?;
    let key = |f: &[Vec<f64>]| (f.len(), f.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>());
    let (a, b) = if key(&fa) <= key(&fb) { (fa, fb) } else { (fb, fa) };
    let total = a.len() * b.len();
    if total <= max_pairs.max(1) {
        let sum: f64 = a.iter().flat_map(|x| b.iter().map(move |y| euclid(x, y))).sum();
        return Ok(sum / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sum: f64 = (0..max_pairs)
        .map(|_| euclid(&a[rng.random_range(0..a.len())], &b[rng.random_range(0..b.len())]))
        .sum();
    Ok(sum / max_pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionBeatConfig {
    /// Minima must fall below this fraction of the median speed.
    pub speed_fraction: f64,
    pub min_gap: f64,
}

impl Default for MotionBeatConfig {
    fn default() -> Self {
        Self {
            speed_fraction: 0.8,
            min_gap: 0.1,
        }
    }
}

/// Mean keypoint speed for each of the `len - 1` frame transitions.
pub fn keypoint_speeds(seq: &KeypointSequence) -> Vec<f64> {
    let x = seq.as_array();
    let k = seq.num_keypoints();
    (0..seq.len().saturating_sub(1))
        .map(|i| {
            (0..k)
                .map(|p| {
                    let dx = x[[i + 1, 2 * p]] - x[[i, 2 * p]];
                    let dy = x[[i + 1, 2 * p + 1]] - x[[i, 2 * p + 1]];
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / k as f64
        })
        .collect()
}

pub fn detect_motion_beats(seq: &KeypointSequence) -> Result<BeatList> {
    detect_motion_beats_with(seq, &MotionBeatConfig::default())
}

/// Kinematic pauses: local speed minima below a fraction of the median
/// speed, refined to sub-frame time by a parabola through the neighbours.
pub fn detect_motion_beats_with(seq: &KeypointSequence, cfg: &MotionBeatConfig) -> Result<BeatList> {
    if seq.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "motion beats need at least 3 frames, got {}",
            seq.len()
        )));
    }
    let v = keypoint_speeds(seq);
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    if median <= 1e-12 {
        return Ok(BeatList::empty());
    }
    let fps = seq.fps();
    let mut cands: Vec<(f64, f64)> = Vec::new();
    for i in 1..v.len().saturating_sub(1) {
        let (a, c, b) = (v[i - 1], v[i], v[i + 1]);
        if c < a && c <= b && c < cfg.speed_fraction * median {
            let curv = a - 2.0 * c + b;
            let off = if curv > 0.0 { (0.5 * (a - b) / curv).clamp(-0.5, 0.5) } else { 0.0 };
            cands.push((c, (i as f64 + 0.5 + off) / fps));
        }
    }
    // slowest first, then greedily enforce the minimum gap
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut kept: Vec<f64> = Vec::new();
    for (_, t) in cands {
        if kept.iter().all(|k| (k - t).abs() >= cfg.min_gap) {
            kept.push(t);
        }
    }
    kept.sort_by(f64::total_cmp);
    BeatList::new(kept)
}

/// Audio and motion beats compared with a Gaussian kernel of width `sigma_bc`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatAlignment {
    pub motion_beats: BeatList,
    pub audio_beats: BeatList,
    pub sigma_bc: f64,
}

impl BeatAlignment {
    pub fn score(&self) -> Result<f64> {
        beat_consistency(&self.audio_beats, &self.motion_beats, self.sigma_bc)
    }
}

/// Mean over audio beats of `exp(-d^2 / (2 sigma^2))`, `d` the distance to
/// the nearest motion beat. Zero when there are no motion beats.
pub fn beat_consistency(audio: &BeatList, motion: &BeatList, sigma_bc: f64) -> Result<f64> {
    if !(sigma_bc > 0.0) {
        return Err(Error::InvalidArgument("sigma_bc must be positive".into()));
    }
    if audio.is_empty() {
        return Err(Error::InvalidArgument("beat consistency needs at least one audio beat".into()));
    }
    if motion.is_empty() {
        return Ok(0.0);
    }
    let m = motion.times();
    let total: f64 = audio
        .times()
        .iter()
        .map(|&b| {
            let j = m.partition_point(|&x| x < b);
            let mut d = f64::INFINITY;
            if j < m.len() {
                d = d.min(m[j] - b);
            }
            if j > 0 {
                d = d.min(b - m[j - 1]);
            }
            (-d * d / (2.0 * sigma_bc * sigma_bc)).exp()
        })
        .sum();
    Ok(total / audio.len() as f64)
}

const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];
pub const FRAMES_MANIFEST_FILE: &str = "frames_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub fps: f64,
    pub frames: Vec<FrameEntry>,
}

/// Lists rendered frames in filename order with `i / fps` timestamps and
/// writes `frames_manifest.json` into the same directory.
pub fn export_frames_manifest(dir: &Path, fps: f64) -> Result<FrameManifest> {
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument("fps must be positive".into()));
    }
    let mut names: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.file_name().is_some_and(|n| n == FRAMES_MANIFEST_FILE) {
            continue;
        }
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            names.push(path);
        } else {
            log::warn!("skipping non-image file {}", path.display());
        }
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no image frames in {}", dir.display())));
    }
    names.sort();
    let frames = names
        .iter()
        .enumerate()
        .map(|(i, p)| FrameEntry {
            index: i,
            file: p.file_name().expect("file").to_string_lossy().into_owned(),
            timestamp: i as f64 / fps,
        })
        .collect();
    let manifest = FrameManifest { fps, frames };
    write_json(&dir.join(FRAMES_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Evaluation summary written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub div: f64,
    pub bc: f64,
    pub num_clips: usize,
    pub config: serde_json::Value,
}

/// Non-overlapping `n`-frame windows of a normalized sequence.
pub fn tile_windows(x: ArrayView2<f64>, n: usize) -> Vec<Array2<f64>> {
    (0..x.nrows() / n).map(|i| x.slice(s![i * n..(i + 1) * n, ..]).to_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn beats(t: &[f64]) -> BeatList {
        BeatList::new(t.to_vec()).unwrap()
    }

    #[test]
    fn bc_closed_forms() {
        let a = beats(&[0.5, 1.2, 2.0]);
        assert_eq!(beat_consistency(&a, &a, 0.1).unwrap(), 1.0);
        let one = beat_consistency(&beats(&[1.0]), &beats(&[1.1]), 0.1).unwrap();
        assert!((one - (-0.5f64).exp()).abs() < 1e-9);
        assert!((one - 0.6065).abs() < 1e-4);
        assert_eq!(beat_consistency(&a, &BeatList::empty(), 0.1).unwrap(), 0.0);
        assert!(beat_consistency(&BeatList::empty(), &a, 0.1).is_err());
        assert!(beat_consistency(&a, &a, 0.0).is_err());
    }

    #[test]
    fn bc_uses_the_nearest_motion_beat() {
        let a = beats(&[1.0]);
        let m = beats(&[0.2, 0.95, 3.0]);
        let want = (-(0.05f64 * 0.05) / (2.0 * 0.01)).exp();
        assert!((beat_consistency(&a, &m, 0.1).unwrap() - want).abs() < 1e-12);
    }

    fn seq(data: Array2<f64>) -> KeypointSequence {
        KeypointSequence::from_array(data, 25.0).unwrap()
    }

    #[test]
    fn motion_beats_degenerate_cases() {
        let still = seq(Array2::from_elem((50, 4), 0.5));
        assert!(detect_motion_beats(&still).unwrap().is_empty());
        let linear = seq(Array2::from_shape_fn((50, 4), |(i, j)| 0.01 * i as f64 + j as f64));
        assert!(detect_motion_beats(&linear).unwrap().is_empty());
        assert!(detect_motion_beats(&seq(Array2::zeros((2, 2)))).is_err());
    }

    #[test]
    fn one_hertz_oscillation_has_two_beats_per_cycle() {
        let fps = 25.0;
        let n = 100;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let t = i as f64 / fps;
            if j == 0 {
                0.5 + 0.1 * (std::f64::consts::TAU * t).sin()
            } else {
                0.5
            }
        });
        let b = detect_motion_beats(&seq(x)).unwrap();
        let expected = [0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.25, 3.75];
        assert_eq!(b.len(), expected.len(), "{:?}", b.times());
        for (got, want) in b.times().iter().zip(expected) {
            assert!((got - want).abs() <= 1.0 / fps, "{got} vs {want}");
        }
    }

    #[test]
    fn diversity_small_cases() {
        let w1 = array![[0.0, 0.0]];
        let w2 = array![[3.0, 4.0]];
        let w3 = array![[6.0, 8.0]];
        let id = IdentityEncoder;
        assert_eq!(diversity(&[w1.view()], &[w1.view()], &id, 100, 0).unwrap(), 0.0);
        // {w1, w2} vs {w3}: distances 10 and 5
        let d = diversity(&[w1.view(), w2.view()], &[w3.view()], &id, 100, 0).unwrap();
        assert!((d - 7.5).abs() < 1e-12);
        // gen == gt as sets gives the self cross-pair mean: (0 + 5 + 5 + 0) / 4
        let set = [w1.view(), w2.view()];
        assert!((diversity(&set, &set, &id, 100, 0).unwrap() - 2.5).abs() < 1e-12);
        assert!(diversity(&[], &set, &id, 100, 0).is_err());
    }

    #[test]
    fn diversity_sampling_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Array2<f64>> = (0..150).map(|_| Array2::from_shape_fn((1, 3), |_| rng.random())).collect();
        let b: Vec<Array2<f64>> = (0..120).map(|_| Array2::from_shape_fn((1, 3), |_| rng.random())).collect();
        let av: Vec<_> = a.iter().map(|x| x.view()).collect();
        let bv: Vec<_> = b.iter().map(|x| x.view()).collect();
        let full = diversity(&av, &bv, &IdentityEncoder, usize::MAX, 0).unwrap();
        let capped = diversity(&av, &bv, &IdentityEncoder, MAX_DIVERSITY_PAIRS, 1).unwrap();
        assert!((full - capped).abs() < 0.02 * full);
        assert_eq!(capped, diversity(&bv, &av, &IdentityEncoder, MAX_DIVERSITY_PAIRS, 1).unwrap());
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let cfg = AutoencoderConfig {
            latent_dim: 3,
            hidden_dim: 5,
            num_frames: 4,
            frame_dim: 6,
            ..AutoencoderConfig::default()
        };
        let mut ae = Autoencoder::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ws: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0))).collect();
        let views: Vec<_> = ws.iter().map(|w| w.view()).collect();
        let (_, g) = ae.loss_and_grad(&views).unwrap();
        for i in 0..ae.params.len() {
            let orig = ae.params.values()[i];
            let h = 1e-5;
            ae.params.values_mut()[i] = orig + h;
            let a = ae.reconstruction_mse(&views).unwrap();
            ae.params.values_mut()[i] = orig - h;
            let b = ae.reconstruction_mse(&views).unwrap();
            ae.params.values_mut()[i] = orig;
            let num = (a - b) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-7 * (1.0 + num.abs()), "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn autoencoder_training_is_seeded_and_reduces_error() {
        let cfg = AutoencoderConfig {
            latent_dim: 4,
            hidden_dim: 16,
            num_frames: 8,
            frame_dim: 4,
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            ..AutoencoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ws: Vec<Array2<f64>> = (0..40)
            .map(|_| {
                let ph: f64 = rng.random_range(0.0..6.0);
                let amp: f64 = rng.random_range(0.5..1.5);
                Array2::from_shape_fn((8, 4), |(i, j)| amp * (0.5 * i as f64 + ph + j as f64).sin())
            })
            .collect();
        let (ae, rep) = train_autoencoder(&ws, &cfg).unwrap();
        assert!(rep.final_train_mse < 0.5 * rep.initial_train_mse, "{rep:?}");
        assert_eq!(rep.num_holdout, 4);
        assert!(rep.holdout_mse.unwrap().is_finite());
        let (ae2, rep2) = train_autoencoder(&ws, &cfg).unwrap();
        assert_eq!(rep, rep2);
        assert_eq!(ae.params(), ae2.params());
        assert_eq!(ae.encode(ws[0].view()).unwrap().len(), 4);
        assert!(train_autoencoder(&[], &cfg).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.json");
        ae.save(&p).unwrap();
        assert_eq!(Autoencoder::load(&p).unwrap().params(), ae.params());
    }

    #[test]
    fn frames_manifest() {
        let dir = tempfile::tempdir().unwrap();
        for i in (0..34).rev() {
            fs::write(dir.path().join(format!("frame_{i:05}.png")), b"x").unwrap();
        }
        fs::write(dir.path().join("notes.txt"), b"x").unwrap();
        let m = export_frames_manifest(dir.path(), 25.0).unwrap();
        assert_eq!(m.frames.len(), 34);
        assert_eq!(m.frames[0].file, "frame_00000.png");
        assert_eq!(m.frames[33].file, "frame_00033.png");
        for w in m.frames.windows(2) {
            assert!((w[1].timestamp - w[0].timestamp - 0.04).abs() < 1e-12);
        }
        // rerunning ignores the manifest it wrote
        assert_eq!(export_frames_manifest(dir.path(), 25.0).unwrap(), m);
        let empty = tempfile::tempdir().unwrap();
        assert!(export_frames_manifest(empty.path(), 25.0).is_err());
    }

    proptest! {
        #[test]
        fn bc_is_translation_invariant(
            a in proptest::collection::btree_set(0u32..400, 1..8),
            m in proptest::collection::btree_set(0u32..400, 1..8),
            shift in 0.0f64..5.0,
        ) {
            let a = beats(&a.iter().map(|v| *v as f64 * 0.01).collect::<Vec<_>>());
            let m = beats(&m.iter().map(|v| *v as f64 * 0.01).collect::<Vec<_>>());
            let x = beat_consistency(&a, &m, 0.1).unwrap();
            let y = beat_consistency(&a.shifted(shift), &m.shifted(shift), 0.1).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn bc_decreases_as_motion_drifts(k in 0usize..30) {
            let a = beats(&[1.0, 2.0, 3.0]);
            let off = |o: f64| beats(&[1.0 + o, 2.0 + o, 3.0 + o]);
            let d0 = k as f64 * 0.01;
            let d1 = d0 + 0.01;
            let x = beat_consistency(&a, &off(d0), 0.1).unwrap();
            let y = beat_consistency(&a, &off(d1), 0.1).unwrap();
            prop_assert!(y <= x);
        }

        #[test]
        fn diversity_is_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 2..12),
            b in proptest::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            let wa: Vec<Array2<f64>> = a.chunks(2).filter(|c| c.len() == 2).map(|c| array![[c[0], c[1]]]).collect();
            let wb: Vec<Array2<f64>> = b.chunks(2).filter(|c| c.len() == 2).map(|c| array![[c[0], c[1]]]).collect();
            let va: Vec<_> = wa.iter().map(|w| w.view()).collect();
            let vb: Vec<_> = wb.iter().map(|w| w.view()).collect();
            let x = diversity(&va, &vb, &IdentityEncoder, 100, 0).unwrap();
            let y = diversity(&vb, &va, &IdentityEncoder, 100, 0).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!(x >= 0.0);
        }

        #[test]
        fn motion_beats_ignore_translation(dx in -1.0f64..1.0, dy in -1.0f64..1.0, ph in 0.0f64..6.0) {
            let x = Array2::from_shape_fn((60, 4), |(i, j)| {
                0.5 + 0.1 * (0.3 * i as f64 + ph + j as f64 * 0.1).sin()
            });
            let shifted = Array2::from_shape_fn((60, 4), |(i, j)| x[[i, j]] + if j % 2 == 0 { dx } else { dy });
            let a = detect_motion_beats(&seq(x)).unwrap();
            let b = detect_motion_beats(&seq(shifted)).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.times().iter().zip(b.times()) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}
