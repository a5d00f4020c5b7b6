//! Windowing, the joint conditional/unconditional training loop, and the
//! synthetic audio-coupled corpus used for desk-scale verification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{quantize_pcm16, FeatureConfig, Waveform, TARGET_SAMPLE_RATE};
use crate::checkpoint::Checkpoint;
use crate::dataset::clip_features;
use crate::denoiser::{Denoiser, FeatureNorm};
use crate::diffusion::{q_sample, ConditioningContext, DiffusionSchedule, PredictionMode, ScheduleSpec};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam};
use crate::types::{GestureClip, KeypointSequence, NormalizationStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_frames: usize,
    pub num_init: usize,
    pub stride: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub prediction_mode: PredictionMode,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_frames: 34,
            num_init: 4,
            stride: 10,
            lr: 5e-4,
            p_uncond: 0.1,
            batch_size: 64,
            max_steps: 20_000,
            seed: 0,
            prediction_mode: PredictionMode::Noise,
            checkpoint_every: 1000,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad("p_uncond must lie in [0, 1]");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if self.num_init == 0 || self.num_init >= self.num_frames {
            return bad("need 0 < num_init < num_frames");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Start offsets `0, stride, 2 stride, ...` of every full window.
pub fn window_starts(len: usize, num_frames: usize, stride: usize) -> Vec<usize> {
    if len < num_frames || stride == 0 {
        return Vec::new();
    }
    (0..=len - num_frames).step_by(stride).collect()
}

/// One normalized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub clip: usize,
    pub start: usize,
    /// `N x 2K` normalized keypoints.
    pub x0: Array2<f64>,
    pub context: ConditioningContext,
}

/// Windows over clips whose whole-clip audio features are already known.
pub fn window_dataset_with_features(
    clips: &[GestureClip],
    features: &[Array2<f64>],
    stats: &NormalizationStats,
    cfg: &TrainConfig,
) -> Result<Vec<TrainingWindow>> {
    let (n, m) = (cfg.num_frames, cfg.num_init);
    let mut out = Vec::new();
    for (ci, (clip, feats)) in clips.iter().zip(features).enumerate() {
        let len = clip.keypoints.len();
        if len < n {
            log::warn!("clip '{}' has {len} frames (< {n}); skipped", clip.id);
            continue;
        }
        if feats.nrows() < len {
            return Err(Error::Shape(format!(
                "clip '{}': {} feature rows for {len} frames",
                clip.id,
                feats.nrows()
            )));
        }
        let norm = stats.normalize_array(clip.keypoints.as_array())?;
        for start in window_starts(len, n, cfg.stride) {
            let x0 = norm.slice(s![start..start + n, ..]).to_owned();
            let audio = feats.slice(s![start..start + n, ..]).to_owned();
            let init = x0.slice(s![..m, ..]).to_owned();
            out.push(TrainingWindow {
                clip: ci,
                start,
                x0,
                context: ConditioningContext::new(init, audio),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Windows of `N` frames at the configured stride with aligned audio.
pub fn window_dataset(
    clips: &[GestureClip],
    stats: &NormalizationStats,
    cfg: &TrainConfig,
) -> Result<Vec<TrainingWindow>> {
    let fc = FeatureConfig::default();
    let feats = clips
        .par_iter()
        .map(|c| clip_features(c, &fc))
        .collect::<Result<Vec<_>>>()?;
    window_dataset_with_features(clips, &feats, stats, cfg)
}

/// Audio standardization fitted over all window features.
pub fn fit_audio_norm(windows: &[TrainingWindow]) -> FeatureNorm {
    let views: Vec<_> = windows.iter().map(|w| w.context.audio.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).expect("windows share feature width");
    FeatureNorm::fit(all.view())
}

const GRAD_CHUNK: usize = 8;

/// Mean squared error of the model's prediction on `x_t = q_sample(x0, t, eps)`
/// against `eps` (noise mode) or `x0` (sample mode), with its gradient.
///
/// The batch is split into fixed chunks evaluated in parallel and reduced in
/// order, so results do not depend on the thread count.
pub fn batch_loss_and_grad(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    x0: &[ArrayView2<f64>],
    contexts: &[&ConditioningContext],
    ts: &[usize],
    eps: &[Array2<f64>],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let b = x0.len();
    if contexts.len() != b || ts.len() != b || eps.len() != b || b == 0 {
        return Err(Error::Shape("batch components disagree in length".into()));
    }
    let numel = (b * x0[0].len()) as f64;
    let mode = model.config().prediction_mode;
    let chunks: Vec<(usize, usize)> = (0..b).step_by(GRAD_CHUNK).map(|i| (i, (i + GRAD_CHUNK).min(b))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(lo, hi)| -> Result<(f64, Option<Vec<f64>>)> {
            let xs = (lo..hi)
                .map(|i| q_sample(x0[i], ts[i], eps[i].view(), sched))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            let (out, cache) = model.forward(&views, &ts[lo..hi], &contexts[lo..hi])?;
            let n = x0[0].nrows();
            let mut diff = out;
            for (j, i) in (lo..hi).enumerate() {
                let target = match mode {
                    PredictionMode::Noise => eps[i].view(),
                    PredictionMode::Sample => x0[i],
                };
                let mut rows = diff.slice_mut(s![j * n..(j + 1) * n, ..]);
                rows -= &target;
            }
            let sq = diff.iter().map(|v| v * v).sum::<f64>();
            let grad = if with_grad {
                let d_out = diff * (2.0 / numel);
                let mut g = vec![0.0; model.num_params()];
                model.backward(&cache, d_out.view(), &mut g);
                Some(g)
            } else {
                None
            };
            Ok((sq, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for (sq, g) in parts {
        loss += sq;
        if let Some(g) = g {
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            }
        }
    }
    Ok((loss / numel, grad))
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub timesteps: Vec<usize>,
    pub null_flags: Vec<bool>,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn null_fraction(&self) -> f64 {
        self.null_flags.iter().filter(|z| **z).count() as f64 / self.null_flags.len() as f64
    }
}

/// Training state; everything needed to continue is in [`Trainer::checkpoint`].
pub struct Trainer {
    model: Denoiser,
    sched: DiffusionSchedule,
    opt: Adam,
    cfg: TrainConfig,
    stats: NormalizationStats,
    windows: Vec<TrainingWindow>,
    step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

// Keeps the epoch shuffle stream distinct from the per-step streams.
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl Trainer {
    /// Fresh model; audio standardization is fitted on `windows`.
    pub fn new(
        model_cfg: crate::denoiser::DenoiserConfig,
        cfg: TrainConfig,
        schedule: ScheduleSpec,
        stats: NormalizationStats,
        windows: Vec<TrainingWindow>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.num_frames != cfg.num_frames || model_cfg.num_init != cfg.num_init {
            return Err(Error::Config(format!(
                "model expects N={}, M={} but training uses N={}, M={}",
                model_cfg.num_frames, model_cfg.num_init, cfg.num_frames, cfg.num_init
            )));
        }
        if model_cfg.prediction_mode != cfg.prediction_mode {
            return Err(Error::Config("model and training prediction modes differ".into()));
        }
        if windows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut model = Denoiser::new(model_cfg, cfg.seed)?;
        model.set_audio_norm(fit_audio_norm(&windows))?;
        let opt = Adam::new(model.num_params(), cfg.lr);
        Ok(Self {
            model,
            sched: schedule.build()?,
            opt,
            cfg,
            stats,
            windows,
            step: 0,
            epoch_order: None,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint, windows: Vec<TrainingWindow>) -> Result<Self> {
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let cfg = ckpt
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training config".into()))?;
        if windows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            model: ckpt.model,
            sched: ckpt.schedule.build()?,
            opt,
            cfg,
            stats: ckpt.stats,
            windows,
            step: ckpt.step,
            epoch_order: None,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Allows changing `max_steps` or `checkpoint_every` when resuming.
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn windows(&self) -> &[TrainingWindow] {
        &self.windows
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            schedule: self.sched.spec(),
            stats: self.stats.clone(),
            step: self.step,
            optimizer: Some(self.opt.clone()),
            train: Some(self.cfg),
        }
    }

    /// Window index for the `g`-th example drawn since step 0.
    fn window_for(&mut self, g: u64) -> usize {
        let w = self.windows.len() as u64;
        let (epoch, pos) = (g / w, (g % w) as usize);
        let stale = self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ SHUFFLE_SALT);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..self.windows.len()).collect();
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().expect("order set above").1[pos]
    }

    /// One Adam update on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let b = self.cfg.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step + 1);
        let idx: Vec<usize> = (0..b as u64).map(|i| self.window_for(self.step * b as u64 + i)).collect();
        let null = ConditioningContext::null();
        let t_max = self.sched.num_steps();
        let mut ts = Vec::with_capacity(b);
        let mut flags = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b);
        for &i in &idx {
            ts.push(rng.random_range(1..=t_max));
            flags.push(rng.random::<f64>() < self.cfg.p_uncond);
            let shape = self.windows[i].x0.dim();
            eps.push(Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng)));
        }
        let x0: Vec<_> = idx.iter().map(|&i| self.windows[i].x0.view()).collect();
        let ctxs: Vec<&ConditioningContext> = idx
            .iter()
            .zip(&flags)
            .map(|(&i, &z)| if z { &null } else { &self.windows[i].context })
            .collect();
        let (loss, grad) = batch_loss_and_grad(&self.model, &self.sched, &x0, &ctxs, &ts, &eps, true)?;
        let mut grad = grad.expect("gradient requested");
        let grad_norm = clip_grad_norm(&mut grad, self.cfg.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            let pnorm = self.model.params().values().iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                diagnostic: format!(
                    "grad_norm={grad_norm}, param_norm={pnorm}, timesteps={ts:?}, windows={idx:?}, null={flags:?}"
                ),
            });
        }
        self.opt.update(self.model.params_mut().values_mut(), &grad);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            timesteps: ts,
            null_flags: flags,
            grad_norm,
        })
    }

    /// Runs until `max_steps`, logging to `out_dir/metrics.jsonl` and writing
    /// `ckpt_XXXXXX.ckpt` every `checkpoint_every` steps plus `final.ckpt`.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("metrics.jsonl");
                Some((
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        let t0 = Instant::now();
        let mut nulls = 0usize;
        let mut seen = 0usize;
        let mut records = Vec::new();
        while self.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            nulls += rec.null_flags.iter().filter(|z| **z).count();
            seen += rec.null_flags.len();
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::json!({
                    "step": rec.step,
                    "loss": rec.loss,
                    "null_fraction": nulls as f64 / seen as f64,
                    "wall_ms": t0.elapsed().as_millis() as u64,
                });
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            if rec.step % 100 == 0 {
                log::info!("step {} loss {:.5}", rec.step, rec.loss);
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && rec.step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(format!("ckpt_{:06}.ckpt", rec.step)))?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Settings for the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub num_keypoints: usize,
    pub seed: u64,
    pub fps: f64,
    /// Range of the gap between consecutive beats, seconds.
    pub min_beat_gap: f64,
    pub max_beat_gap: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_clips: 8,
            frames_per_clip: 128,
            num_keypoints: crate::types::DEFAULT_NUM_KEYPOINTS,
            seed: 0,
            fps: crate::types::DEFAULT_FPS,
            min_beat_gap: 0.4,
            max_beat_gap: 0.8,
        }
    }
}

/// A generated clip with the beat times it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub clip: GestureClip,
    /// Beat times inside `[0, duration]`.
    pub beats: Vec<f64>,
}

const BURST_SECONDS: f64 = 0.2;
const BURST_ATTACK: f64 = 0.002;
const BURST_DECAY: f64 = 0.06;
const BURST_FADE: f64 = 0.05;
const NOISE_LEVEL: f64 = 1e-3;

/// Clips whose keypoints swing between alternating extremes, reversing
/// direction exactly at the onsets of tone bursts in the audio. The swing
/// amplitude after each beat follows that burst's loudness, so the audio
/// predicts both the timing and the size of the motion.
///
/// Keypoints are rounded to f32 and audio to 16-bit PCM so written and
/// in-memory datasets agree exactly.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<SyntheticClip>> {
    if cfg.num_clips == 0 || cfg.frames_per_clip == 0 || cfg.num_keypoints == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    if !(cfg.min_beat_gap > 0.0 && cfg.min_beat_gap <= cfg.max_beat_gap) {
        return Err(Error::InvalidArgument("need 0 < min_beat_gap <= max_beat_gap".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_keypoints;
    let base: Vec<[f64; 2]> = (0..k)
        .map(|_| [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)])
        .collect();
    let dirs: Vec<[f64; 2]> = (0..k)
        .map(|_| {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = rng.random_range(0.05..0.1);
            [mag * ang.cos(), mag * ang.sin()]
        })
        .collect();
    (0..cfg.num_clips)
        .map(|c| {
            let mut crng = ChaCha8Rng::seed_from_u64(cfg.seed);
            crng.set_stream(c as u64 + 1);
            synthetic_clip(cfg, &base, &dirs, &format!("synth_{c:04}"), &mut crng)
        })
        .collect()
}

fn synthetic_clip(
    cfg: &SyntheticConfig,
    base: &[[f64; 2]],
    dirs: &[[f64; 2]],
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticClip> {
    let n = cfg.frames_per_clip;
    let duration = n as f64 / cfg.fps;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };

    // beat grid covering the whole clip, starting before t = 0
    let mut beats = vec![-rng.random_range(0.0..cfg.max_beat_gap.min(0.6))];
    while *beats.last().expect("non-empty") <= duration {
        let gap = rng.random_range(cfg.min_beat_gap..=cfg.max_beat_gap);
        beats.push(beats.last().expect("non-empty") + gap);
    }
    let loud: Vec<f64> = beats.iter().map(|_| rng.random_range(0.4..1.0)).collect();
    let freq: Vec<f64> = beats.iter().map(|_| rng.random_range(200.0..800.0)).collect();
    let extreme: Vec<f64> = loud
        .iter()
        .enumerate()
        .map(|(j, a)| if j % 2 == 0 { sign * a } else { -sign * a })
        .collect();

    let g = |t: f64| -> f64 {
        let j = beats.partition_point(|&b| b <= t).saturating_sub(1);
        let j = j.min(beats.len() - 2);
        let u = ((t - beats[j]) / (beats[j + 1] - beats[j])).clamp(0.0, 1.0);
        let w = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
        extreme[j] + (extreme[j + 1] - extreme[j]) * w
    };
    let k = base.len();
    let mut data = Array2::zeros((n, 2 * k));
    for i in 0..n {
        let gt = g(i as f64 / cfg.fps);
        for p in 0..k {
            for d in 0..2 {
                let v = base[p][d] + dirs[p][d] * gt;
                data[[i, 2 * p + d]] = v as f32 as f64;
            }
        }
    }

    let sr = TARGET_SAMPLE_RATE as f64;
    let num_samples = (duration * sr).round() as usize;
    let mut samples: Vec<f64> = (0..num_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            NOISE_LEVEL * z
        })
        .collect();
    for (j, &b) in beats.iter().enumerate() {
        let lo = (b.max(0.0) * sr).ceil() as usize;
        let hi = (((b + BURST_SECONDS) * sr).ceil() as usize).min(num_samples);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let dt = i as f64 / sr - b;
            let fade = ((b + BURST_SECONDS - i as f64 / sr) / BURST_FADE).min(1.0);
            let env = (dt / BURST_ATTACK).min(1.0) * (-dt / BURST_DECAY).exp() * fade;
            *s += 0.5 * loud[j] * env * (std::f64::consts::TAU * freq[j] * dt).sin();
        }
    }
    let samples = samples.into_iter().map(quantize_pcm16).collect();
    let in_clip: Vec<f64> = beats.iter().copied().filter(|b| (0.0..=duration).contains(b)).collect();
    Ok(SyntheticClip {
        clip: GestureClip {
            id: id.to_string(),
            keypoints: KeypointSequence::from_array(data, cfg.fps)?,
            audio: Waveform::new(samples, TARGET_SAMPLE_RATE)?,
        },
        beats: in_clip,
    })
}

/// Writes the synthetic clips plus `beats.json` ground truth per clip.
pub fn write_synthetic_dataset(root: &Path, clips: &[SyntheticClip]) -> Result<NormalizationStats> {
    let plain: Vec<GestureClip> = clips.iter().map(|c| c.clip.clone()).collect();
    let stats = crate::dataset::write_dataset(root, &plain)?;
    for (i, c) in clips.iter().enumerate() {
        let p: PathBuf = root.join(format!("clip_{i:04}")).join("beats.json");
        crate::dataset::write_json(&p, &c.beats)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::types::compute_stats;

    fn tiny_model() -> DenoiserConfig {
        DenoiserConfig {
            hidden_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            num_keypoints: 3,
            audio_dim: 32,
            num_frames: 10,
            num_init: 2,
            ff_mult: 4,
            prediction_mode: PredictionMode::Noise,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            num_frames: 10,
            num_init: 2,
            stride: 5,
            batch_size: 4,
            max_steps: 5,
            ..TrainConfig::default()
        }
    }

    fn synth(n: usize, frames: usize, seed: u64) -> Vec<GestureClip> {
        let cfg = SyntheticConfig {
            num_clips: n,
            frames_per_clip: frames,
            num_keypoints: 3,
            seed,
            ..SyntheticConfig::default()
        };
        make_synthetic_dataset(&cfg).unwrap().into_iter().map(|c| c.clip).collect()
    }

    fn trainer(tc: TrainConfig) -> Trainer {
        let clips = synth(2, 30, 1);
        let seqs: Vec<_> = clips.iter().map(|c| c.keypoints.clone()).collect();
        let stats = compute_stats(&seqs).unwrap();
        let windows = window_dataset(&clips, &stats, &tc).unwrap();
        let mut mc = tiny_model();
        mc.prediction_mode = tc.prediction_mode;
        Trainer::new(mc, tc, ScheduleSpec::default(), stats, windows).unwrap()
    }

    #[test]
    fn window_start_arithmetic() {
        assert_eq!(window_starts(64, 34, 10), vec![0, 10, 20, 30]);
        assert!(window_starts(33, 34, 10).is_empty());
        let w = window_starts(1024, 34, 10);
        assert_eq!(w.len(), 100);
        assert_eq!(*w.last().unwrap(), 990);
        assert_eq!(window_starts(34, 34, 10), vec![0]);
    }

    #[test]
    fn windows_carry_their_own_init_frames() {
        let clips = synth(3, 40, 2);
        let seqs: Vec<_> = clips.iter().map(|c| c.keypoints.clone()).collect();
        let stats = compute_stats(&seqs).unwrap();
        let cfg = tiny_train();
        let ws = window_dataset(&clips, &stats, &cfg).unwrap();
        assert_eq!(ws.len(), 3 * 7);
        for w in &ws {
            assert_eq!(w.context.init_frames, w.x0.slice(s![..2, ..]));
            assert_eq!(w.context.audio.dim(), (10, 32));
        }
        // features for a window equal a direct extraction over its span
        let w = &ws[4];
        let direct = crate::audio::extract_features_range(
            &clips[w.clip].audio,
            w.start,
            10,
            &FeatureConfig::default(),
        )
        .unwrap();
        assert_eq!(w.context.audio, direct.features);
    }

    #[test]
    fn short_clips_are_skipped_and_empty_is_an_error() {
        let clips = synth(1, 9, 0);
        let stats = compute_stats(&[clips[0].keypoints.clone()]).unwrap();
        assert!(matches!(
            window_dataset(&clips, &stats, &tiny_train()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.p_uncond = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.stride = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.num_init = 34;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn fixed_seed_reproduces_losses() {
        let a: Vec<f64> = trainer(tiny_train()).train(None).unwrap().iter().map(|r| r.loss).collect();
        let b: Vec<f64> = trainer(tiny_train()).train(None).unwrap().iter().map(|r| r.loss).collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn always_null_when_p_uncond_is_one() {
        let mut tc = tiny_train();
        tc.p_uncond = 1.0;
        let recs = trainer(tc).train(None).unwrap();
        assert!(recs.iter().all(|r| r.null_flags.iter().all(|z| *z)));
        let mut tc = tiny_train();
        tc.p_uncond = 0.0;
        let recs = trainer(tc).train(None).unwrap();
        assert!(recs.iter().all(|r| r.null_flags.iter().all(|z| !*z)));
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let mut tc = tiny_train();
        tc.max_steps = 0;
        let mut t = trainer(tc);
        let init = t.model().params().clone();
        let dir = tempfile::tempdir().unwrap();
        t.train(Some(dir.path())).unwrap();
        let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.model.params(), &init);
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut tc = tiny_train();
        tc.max_steps = 6;
        let full: Vec<f64> = trainer(tc).train(None).unwrap().iter().map(|r| r.loss).collect();
        let mut first = trainer(TrainConfig { max_steps: 3, ..tc });
        first.train(None).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut second = Trainer::resume(ck, first.windows().to_vec()).unwrap();
        second.config_mut().max_steps = 6;
        let rest: Vec<f64> = second.train(None).unwrap().iter().map(|r| r.loss).collect();
        assert_eq!(&full[3..], &rest[..]);
    }

    #[test]
    fn metrics_log_and_checkpoints_written() {
        let mut tc = tiny_train();
        tc.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        trainer(tc).train(Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 5);
        for (i, l) in lines.iter().enumerate() {
            assert_eq!(l["step"], i as u64 + 1);
            assert!(l["loss"].as_f64().unwrap().is_finite());
            assert!(l.get("null_fraction").is_some() && l.get("wall_ms").is_some());
        }
        assert!(dir.path().join("ckpt_000002.ckpt").is_file());
        assert!(dir.path().join("ckpt_000004.ckpt").is_file());
        assert!(dir.path().join(FINAL_CHECKPOINT).is_file());
    }

    #[test]
    fn sample_mode_oracle_has_zero_loss() {
        // a perfect x0 predictor scores exactly zero under the sample objective
        let x0 = Array2::from_shape_fn((10, 6), |(i, j)| (i * j) as f64 * 0.1);
        assert_eq!(crate::diffusion::sample_loss(x0.view(), x0.view()).unwrap(), 0.0);
        let mut tc = tiny_train();
        tc.prediction_mode = PredictionMode::Sample;
        let recs = trainer(tc).train(None).unwrap();
        assert!(recs.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_non_degenerate() {
        let cfg = SyntheticConfig {
            num_clips: 3,
            frames_per_clip: 64,
            num_keypoints: 5,
            seed: 9,
            ..SyntheticConfig::default()
        };
        let a = make_synthetic_dataset(&cfg).unwrap();
        let b = make_synthetic_dataset(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip.keypoints, y.clip.keypoints);
            assert_eq!(x.clip.audio.samples, y.clip.audio.samples);
            assert_eq!(x.beats, y.beats);
            assert!(crate::types::validate_clip(&x.clip).is_empty());
            assert!(!x.beats.is_empty());
        }
        let seqs: Vec<_> = a.iter().map(|c| c.clip.keypoints.clone()).collect();
        let stats = compute_stats(&seqs).unwrap();
        assert!(stats.std.iter().all(|&s| s > crate::types::STD_EPSILON));
        assert!(stats.mean.iter().all(|m| m.is_finite()));
        assert!(make_synthetic_dataset(&SyntheticConfig { num_clips: 0, ..cfg }).is_err());
    }

    #[test]
    fn batch_gradient_is_chunk_invariant() {
        let t = trainer(tiny_train());
        let ws = &t.windows()[..9];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts: Vec<usize> = (0..9).map(|_| rng.random_range(1..=500)).collect();
        let eps: Vec<Array2<f64>> = (0..9)
            .map(|_| Array2::from_shape_simple_fn((10, 6), || StandardNormal.sample(&mut rng)))
            .collect();
        let x0: Vec<_> = ws.iter().map(|w| w.x0.view()).collect();
        let ctx: Vec<_> = ws.iter().map(|w| &w.context).collect();
        let (l, g) = batch_loss_and_grad(t.model(), t.schedule(), &x0, &ctx, &ts, &eps, true).unwrap();
        // sum of per-example contributions weighted by their share
        let mut lsum = 0.0;
        let mut gsum = vec![0.0; g.as_ref().unwrap().len()];
        for i in 0..9 {
            let (li, gi) = batch_loss_and_grad(
                t.model(),
                t.schedule(),
                &x0[i..i + 1],
                &ctx[i..i + 1],
                &ts[i..i + 1],
                &eps[i..i + 1],
                true,
            )
            .unwrap();
            lsum += li / 9.0;
            for (a, b) in gsum.iter_mut().zip(gi.unwrap()) {
                *a += b / 9.0;
            }
        }
        assert!((l - lsum).abs() < 1e-12 * l.max(1.0));
        for (a, b) in g.unwrap().iter().zip(&gsum) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }
}
