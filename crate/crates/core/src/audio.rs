//! Waveform loading, frame-aligned log-mel features and onset beats.
//!
//! Features: each video frame `i` owns an analysis window centered at
//! `(i + 0.5) / fps` seconds. The window is Hann-weighted, transformed, pooled
//! into triangular mel bands and log-compressed with a fixed floor. Samples
//! outside the waveform read as zero.
//!
//! Beats: positive spectral flux of a 10 ms hop log-mel spectrogram,
//! peak-picked against `mean + delta * std` of the flux envelope.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const NUM_MEL_BINS: usize = 32;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same waveform with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn resampled(&self, rate: u32) -> Self {
        Self {
            samples: resample_linear(&self.samples, self.sample_rate, rate),
            sample_rate: rate,
        }
    }
}

/// Linear-interpolation resampler. Output sample `j` reads input position
/// `j * from / to`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let n_out = ((samples.len() - 1) as f64 / ratio).floor() as usize + 1;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let a = samples[i.min(samples.len() - 1)];
            let b = samples[(i + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Reads a PCM (or 32-bit float) WAV file, averages channels and resamples
/// to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedAudio {
            path: path.to_path_buf(),
            detail: "zero channels".into(),
        });
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} samples with {bits} bits"),
            })
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let w = Waveform::new(mono, spec.sample_rate).map_err(|e| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(w.resampled(TARGET_SAMPLE_RATE))
}

/// Quantizes a sample to the 16-bit PCM grid used by [`write_wav`].
pub fn quantize_pcm16(x: f64) -> f64 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() / 32768.0
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
    }
    fb
}

/// Frequency (Hz) at which mel band `m` peaks.
pub fn mel_band_center(sample_rate: u32, n_mels: usize, m: usize) -> f64 {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    mel_to_hz(max_mel * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Windowed log-mel analysis of single frames.
pub struct LogMelAnalyzer {
    window: Vec<f64>,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Array2<f64>,
    floor: f64,
}

impl LogMelAnalyzer {
    pub fn new(sample_rate: u32, window_len: usize, n_mels: usize, floor: f64) -> Self {
        let n_fft = window_len.next_power_of_two();
        let window = (0..window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window_len as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            window,
            n_fft,
            fft,
            filterbank: mel_filterbank(sample_rate, n_fft, n_mels),
            floor,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.filterbank.nrows()
    }

    /// Log-mel energies of the window starting at sample `start` (may be
    /// negative or run past the end; missing samples are zero).
    pub fn frame(&self, samples: &[f64], start: i64, out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (i, w) in self.window.iter().enumerate() {
            let idx = start + i as i64;
            if idx >= 0 && (idx as usize) < samples.len() {
                buf[i].re = samples[idx as usize] * w;
            }
        }
        self.fft.process(&mut buf);
        let n_bins = self.n_fft / 2 + 1;
        for (m, o) in out.iter_mut().enumerate() {
            let row = self.filterbank.row(m);
            let mut e = 0.0;
            for k in 0..n_bins {
                let wk = row[k];
                if wk != 0.0 {
                    e += wk * buf[k].norm_sqr();
                }
            }
            *o = e.max(self.floor).ln();
        }
    }
}

/// Parameters of the per-frame feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub fps: f64,
    pub window_seconds: f64,
    pub num_bins: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fps: 25.0,
            window_seconds: 0.064,
            num_bins: NUM_MEL_BINS,
            log_floor: LOG_FLOOR,
        }
    }
}

/// `N x 32` per-frame audio features.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub features: Array2<f64>,
    pub fps: f64,
}

impl AudioFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }
}

pub fn extract_features(w: &Waveform, num_frames: usize) -> Result<AudioFeatureSequence> {
    extract_features_range(w, 0, num_frames, &FeatureConfig::default())
}

/// Features for frames `[first_frame, first_frame + num_frames)` of the
/// waveform's frame grid.
pub fn extract_features_range(
    w: &Waveform,
    first_frame: usize,
    num_frames: usize,
    cfg: &FeatureConfig,
) -> Result<AudioFeatureSequence> {
    if num_frames == 0 {
        return Err(Error::InvalidArgument("num_frames must be positive".into()));
    }
    let sr = w.sample_rate as f64;
    let win = (cfg.window_seconds * sr).round() as usize;
    let analyzer = LogMelAnalyzer::new(w.sample_rate, win, cfg.num_bins, cfg.log_floor);
    let mut features = Array2::zeros((num_frames, cfg.num_bins));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let center = ((first_frame + i) as f64 + 0.5) / cfg.fps * sr;
        let start = (center - win as f64 / 2.0).round() as i64;
        analyzer.frame(
            &w.samples,
            start,
            row.as_slice_mut().expect("row-major feature matrix"),
        );
    }
    Ok(AudioFeatureSequence {
        features,
        fps: cfg.fps,
    })
}

/// Ascending, strictly increasing beat times in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatList {
    times: Vec<f64>,
}

impl BeatList {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidArgument("beat times must be finite and non-negative".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("beat times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Shifts every beat by `offset` seconds, dropping beats that become negative.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            times: self
                .times
                .iter()
                .map(|t| t + offset)
                .filter(|t| *t >= 0.0)
                .collect(),
        }
    }
}

/// Onset detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnsetConfig {
    pub hop_seconds: f64,
    pub window_seconds: f64,
    pub delta: f64,
    pub min_gap_seconds: f64,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            hop_seconds: 0.010,
            window_seconds: 0.025,
            delta: 1.0,
            min_gap_seconds: 0.100,
        }
    }
}

/// Positive spectral flux of the log-mel spectrogram; entry `k` belongs to
/// time `k * hop`.
pub fn onset_envelope(w: &Waveform, cfg: &OnsetConfig) -> Vec<f64> {
    let sr = w.sample_rate as f64;
    let hop = (cfg.hop_seconds * sr).round().max(1.0) as usize;
    let win = (cfg.window_seconds * sr).round().max(2.0) as usize;
    let analyzer = LogMelAnalyzer::new(w.sample_rate, win, NUM_MEL_BINS, LOG_FLOOR);
    let frames = w.samples.len() / hop + 1;
    let mut prev = vec![0.0; NUM_MEL_BINS];
    let mut cur = vec![0.0; NUM_MEL_BINS];
    let mut env = Vec::with_capacity(frames);
    for k in 0..frames {
        let start = (k * hop) as i64 - (win / 2) as i64;
        analyzer.frame(&w.samples, start, &mut cur);
        // flux against a zero-padded window would report the signal start
        let flux = if k * hop < hop + win / 2 {
            0.0
        } else {
            cur.iter().zip(&prev).map(|(c, p)| (c - p).max(0.0)).sum()
        };
        env.push(flux);
        std::mem::swap(&mut prev, &mut cur);
    }
    env
}

/// Local maxima of `env` above `threshold`, thinned greedily (strongest
/// first) so that accepted peaks are at least `min_gap` indices apart.
pub(crate) fn pick_peaks(env: &[f64], threshold: f64, min_gap: f64) -> Vec<usize> {
    let n = env.len();
    let mut cands: Vec<usize> = (0..n)
        .filter(|&k| {
            let left = if k > 0 { env[k - 1] } else { f64::NEG_INFINITY };
            let right = if k + 1 < n { env[k + 1] } else { f64::NEG_INFINITY };
            env[k] > threshold && env[k] > 0.0 && env[k] > left && env[k] >= right
        })
        .collect();
    cands.sort_by(|&a, &b| env[b].total_cmp(&env[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| (k as f64 - c as f64).abs() >= min_gap) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

pub fn detect_audio_beats(w: &Waveform) -> BeatList {
    detect_audio_beats_with(w, &OnsetConfig::default())
}

pub fn detect_audio_beats_with(w: &Waveform, cfg: &OnsetConfig) -> BeatList {
    if w.samples.is_empty() {
        return BeatList::empty();
    }
    let env = onset_envelope(w, cfg);
    let n = env.len() as f64;
    let mean = env.iter().sum::<f64>() / n;
    let std = (env.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let hop = (cfg.hop_seconds * w.sample_rate as f64).round().max(1.0) / w.sample_rate as f64;
    let peaks = pick_peaks(&env, mean + cfg.delta * std, cfg.min_gap_seconds / hop - 1e-9);
    let duration = w.duration();
    let times = peaks
        .into_iter()
        .map(|k| (k as f64 * hop).min(duration))
        .collect::<Vec<_>>();
    let mut dedup: Vec<f64> = Vec::with_capacity(times.len());
    for t in times {
        if dedup.last().is_none_or(|&l| t > l) {
            dedup.push(t);
        }
    }
    BeatList::new(dedup).expect("peaks are sorted and non-negative")
}
