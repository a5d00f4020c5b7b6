//! One-shot clip generation and long-form assembly.
//!
//! Long audio is cut into `N`-frame segments starting every `N - M` frames.
//! Each segment after the first is conditioned on the `M` frames it shares
//! with its predecessor, and the shared frames are linearly blended.

use ndarray::{s, Array2, ArrayView2};

use crate::audio::{extract_features_range, FeatureConfig, Waveform};
use crate::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, ConditioningContext, DenoiseModel, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::types::{KeypointFrame, KeypointSequence, NormalizationStats};

const SEGMENT_SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

/// Inputs for generating a full-length sequence from one source image.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub source_keypoints: KeypointFrame,
    pub audio: Waveform,
    pub guidance_s: f64,
    pub seed: u64,
    pub clamp_x0: Option<f64>,
}

impl GenerationRequest {
    pub fn new(source_keypoints: KeypointFrame, audio: Waveform, seed: u64) -> Self {
        Self {
            source_keypoints,
            audio,
            guidance_s: SamplerConfig::default().guidance_scale,
            seed,
            clamp_x0: None,
        }
    }

    pub fn validate(&self, num_keypoints: usize) -> Result<()> {
        if !self.guidance_s.is_finite() {
            return Err(Error::InvalidArgument("guidance scale must be finite".into()));
        }
        if self.source_keypoints.num_keypoints() != num_keypoints {
            return Err(Error::KeypointMismatch {
                expected: num_keypoints,
                found: self.source_keypoints.num_keypoints(),
            });
        }
        if !self.source_keypoints.is_finite() {
            return Err(Error::InvalidArgument("source keypoints must be finite".into()));
        }
        Ok(())
    }
}

/// A generated sequence in pixel-normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub keypoints: KeypointSequence,
    pub timestamps: Vec<f64>,
    pub segment_starts: Vec<usize>,
}

/// Samples one `N`-frame clip for the given audio features and init frames.
pub fn generate_clip<D: DenoiseModel + ?Sized>(
    model: &D,
    sched: &DiffusionSchedule,
    audio_feats: ArrayView2<f64>,
    init: ArrayView2<f64>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = audio_feats.nrows();
    let width = init.ncols();
    if n == 0 || init.nrows() == 0 {
        return Err(Error::Shape("audio features and init frames must be non-empty".into()));
    }
    let ctx = ConditioningContext::new(init.to_owned(), audio_feats.to_owned());
    let out = sample(model, &ctx, (n, width), sampler, seed, sched)?;
    if out.dim() != (n, width) {
        return Err(Error::Shape(format!("model produced {:?}, expected ({n}, {width})", out.dim())));
    }
    Ok(out)
}

/// Blends two views of the same `M` frames: frame `i` takes weight
/// `(M - i) / (M + 1)` from `prev` and `(i + 1) / (M + 1)` from `next`.
pub fn interpolate_overlap(prev: ArrayView2<f64>, next: ArrayView2<f64>) -> Result<Array2<f64>> {
    if prev.dim() != next.dim() {
        return Err(Error::Shape(format!(
            "overlap views differ: {:?} vs {:?}",
            prev.dim(),
            next.dim()
        )));
    }
    let m = prev.nrows();
    let mut out = prev.to_owned();
    for (i, (mut row, nrow)) in out.rows_mut().into_iter().zip(next.rows()).enumerate() {
        let w = (i + 1) as f64 / (m + 1) as f64;
        // written as a lerp so identical inputs come back unchanged
        row.zip_mut_with(&nrow, |p, &q| *p += w * (q - *p));
    }
    Ok(out)
}

/// Segment start frames covering `total` frames with segments of `n`
/// overlapping by `m`. A trailing remainder gets one extra segment aligned
/// to end on the last frame.
pub fn segment_starts(total: usize, n: usize, m: usize) -> Result<Vec<usize>> {
    if m >= n {
        return Err(Error::InvalidArgument(format!("overlap {m} must be below segment length {n}")));
    }
    if total < n {
        return Err(Error::InvalidArgument(format!("{total} frames is shorter than one segment of {n}")));
    }
    let hop = n - m;
    let mut starts: Vec<usize> = (0..).map(|j| j * hop).take_while(|s| s + n <= total).collect();
    let last_end = starts.last().expect("at least one segment") + n;
    if last_end < total {
        starts.push(total - n);
    }
    Ok(starts)
}

/// Output length for `segments` evenly spaced segments.
pub fn stitched_len(segments: usize, n: usize, m: usize) -> usize {
    if segments == 0 {
        0
    } else {
        n + (segments - 1) * (n - m)
    }
}

/// Whole frames of audio on a `fps` grid.
pub fn audio_frame_count(w: &Waveform, fps: f64) -> usize {
    (w.samples.len() as f64 * fps / w.sample_rate as f64 + 1e-9).floor() as usize
}

pub fn segment_seed(seed: u64, segment: usize) -> u64 {
    seed.wrapping_add((segment as u64).wrapping_mul(SEGMENT_SEED_STRIDE))
}

/// Generates keypoints for the whole audio track.
pub fn generate_long(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    stats: &NormalizationStats,
    req: &GenerationRequest,
) -> Result<GeneratedSequence> {
    let cfg = model.config();
    let (n, m) = (cfg.num_frames, cfg.num_init);
    req.validate(cfg.num_keypoints)?;
    if stats.num_keypoints() != cfg.num_keypoints {
        return Err(Error::KeypointMismatch {
            expected: cfg.num_keypoints,
            found: stats.num_keypoints(),
        });
    }
    let fc = FeatureConfig::default();
    let total = audio_frame_count(&req.audio, fc.fps);
    if total < n {
        return Err(Error::AudioTooShort {
            min_seconds: n as f64 / fc.fps,
            got_seconds: req.audio.duration(),
        });
    }
    let starts = segment_starts(total, n, m)?;
    let feats = extract_features_range(&req.audio, 0, total, &fc)?.features;

    let src = stats.normalize_array(req.source_keypoints.to_row().insert_axis(ndarray::Axis(0)).view())?;
    let sampler = SamplerConfig {
        guidance_scale: req.guidance_s,
        clamp_x0: req.clamp_x0,
    };
    let mut out = Array2::<f64>::zeros((total, cfg.frame_dim()));
    let mut end: usize = 0;
    for (j, &start) in starts.iter().enumerate() {
        let init = if j == 0 {
            src.broadcast((m, cfg.frame_dim())).expect("one row broadcasts").to_owned()
        } else {
            out.slice(s![start..start + m, ..]).to_owned()
        };
        let audio = feats.slice(s![start..start + n, ..]);
        let seg = generate_clip(model, sched, audio, init.view(), &sampler, segment_seed(req.seed, j))?;
        let overlap = end.saturating_sub(start);
        if overlap > 0 {
            let blended = interpolate_overlap(out.slice(s![start..end, ..]), seg.slice(s![..overlap, ..]))?;
            out.slice_mut(s![start..end, ..]).assign(&blended);
        }
        out.slice_mut(s![start + overlap..start + n, ..]).assign(&seg.slice(s![overlap.., ..]));
        end = start + n;
    }
    debug_assert_eq!(end, total);

    let keypoints = KeypointSequence::from_array(stats.denormalize_array(out.view())?, fc.fps)?;
    let timestamps = (0..total).map(|i| i as f64 / fc.fps).collect();
    Ok(GeneratedSequence {
        keypoints,
        timestamps,
        segment_starts: starts,
    })
}

pub fn generate_from_checkpoint(ckpt: &Checkpoint, req: &GenerationRequest) -> Result<GeneratedSequence> {
    let sched = ckpt.schedule.build()?;
    generate_long(&ckpt.model, &sched, &ckpt.stats, req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::{make_schedule, PredictionMode};
    use proptest::prelude::{prop_assert_eq, proptest};

    fn tiny() -> (Denoiser, DiffusionSchedule, NormalizationStats) {
        let cfg = DenoiserConfig {
            hidden_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            num_keypoints: 3,
            audio_dim: 32,
            num_frames: 34,
            num_init: 4,
            ff_mult: 2,
            prediction_mode: PredictionMode::Noise,
        };
        let stats = NormalizationStats {
            mean: vec![0.5; 6],
            std: vec![0.1; 6],
        };
        (Denoiser::new(cfg, 1).unwrap(), make_schedule(5, 1e-4, 0.02).unwrap(), stats)
    }

    fn request(frames: usize, seed: u64) -> GenerationRequest {
        let sr = 16_000;
        let len = frames * sr as usize / 25;
        let samples = (0..len).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
        GenerationRequest::new(
            KeypointFrame::new(vec![[0.4, 0.5], [0.6, 0.5], [0.5, 0.3]]),
            Waveform::new(samples, sr).unwrap(),
            seed,
        )
    }

    #[test]
    fn overlap_weights() {
        let prev = Array2::from_elem((4, 1), 1.0);
        let next = Array2::zeros((4, 1));
        let b = interpolate_overlap(prev.view(), next.view()).unwrap();
        for (i, want) in [0.8, 0.6, 0.4, 0.2].iter().enumerate() {
            assert!((b[[i, 0]] - want).abs() < 1e-12);
        }
        let same = Array2::from_shape_fn((4, 3), |(i, j)| (i * 7 + j) as f64 * 0.123);
        assert_eq!(interpolate_overlap(same.view(), same.view()).unwrap(), same);
        assert!(interpolate_overlap(prev.view(), Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn segment_layout() {
        assert_eq!(segment_starts(34, 34, 4).unwrap(), vec![0]);
        assert_eq!(segment_starts(64, 34, 4).unwrap(), vec![0, 30]);
        assert_eq!(segment_starts(70, 34, 4).unwrap(), vec![0, 30, 36]);
        assert!(segment_starts(33, 34, 4).is_err());
        for s in 1..=5 {
            let total = stitched_len(s, 34, 4);
            assert_eq!(segment_starts(total, 34, 4).unwrap().len(), s);
        }
    }

    #[test]
    fn clip_shape_and_determinism() {
        let (model, sched, _) = tiny();
        let audio = Array2::from_elem((34, 32), 0.1);
        let init = Array2::zeros((4, 6));
        let sc = SamplerConfig::default();
        let a = generate_clip(&model, &sched, audio.view(), init.view(), &sc, 7).unwrap();
        let b = generate_clip(&model, &sched, audio.view(), init.view(), &sc, 7).unwrap();
        assert_eq!(a.dim(), (34, 6));
        assert_eq!(a, b);
        assert_ne!(a, generate_clip(&model, &sched, audio.view(), init.view(), &sc, 8).unwrap());
    }

    #[test]
    fn long_generation_lengths() {
        let (model, sched, stats) = tiny();
        let one = generate_long(&model, &sched, &stats, &request(34, 3)).unwrap();
        assert_eq!(one.keypoints.len(), 34);
        assert_eq!(one.segment_starts, vec![0]);
        let two = generate_long(&model, &sched, &stats, &request(64, 3)).unwrap();
        assert_eq!(two.keypoints.len(), 64);
        assert_eq!(two.timestamps[25], 1.0);
        // a single segment is exactly one clip, denormalized
        let feats = extract_features_range(&request(34, 3).audio, 0, 34, &FeatureConfig::default())
            .unwrap()
            .features;
        let init = stats
            .normalize_array(request(34, 3).source_keypoints.to_row().insert_axis(ndarray::Axis(0)).view())
            .unwrap();
        let init = init.broadcast((4, 6)).unwrap().to_owned();
        let clip = generate_clip(&model, &sched, feats.view(), init.view(), &SamplerConfig::default(), 3).unwrap();
        let want = stats.denormalize_array(clip.view()).unwrap();
        assert_eq!(one.keypoints.as_array(), want.view());
    }

    #[test]
    fn long_generation_errors() {
        let (model, sched, stats) = tiny();
        match generate_long(&model, &sched, &stats, &request(30, 0)) {
            Err(Error::AudioTooShort { min_seconds, .. }) => assert!((min_seconds - 1.36).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        let mut req = request(40, 0);
        req.source_keypoints = KeypointFrame::new(vec![[0.5, 0.5]]);
        assert!(matches!(
            generate_long(&model, &sched, &stats, &req),
            Err(Error::KeypointMismatch { .. })
        ));
        let mut req = request(40, 0);
        req.guidance_s = f64::NAN;
        assert!(generate_long(&model, &sched, &stats, &req).is_err());
    }

    #[test]
    fn trailing_segment_blends_actual_overlap() {
        let (model, sched, stats) = tiny();
        let g = generate_long(&model, &sched, &stats, &request(70, 5)).unwrap();
        assert_eq!(g.keypoints.len(), 70);
        assert_eq!(g.segment_starts, vec![0, 30, 36]);
        assert!(g.keypoints.as_array().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn output_covers_every_audio_frame(frames in 34usize..160) {
            let (model, sched, stats) = tiny();
            let g = generate_long(&model, &sched, &stats, &request(frames, 1)).unwrap();
            prop_assert_eq!(g.keypoints.len(), frames);
            prop_assert_eq!(g.timestamps.len(), frames);
            let s = g.segment_starts.len();
            if (frames - 34) % 30 == 0 {
                prop_assert_eq!(frames, stitched_len(s, 34, 4));
            }
        }
    }
}
