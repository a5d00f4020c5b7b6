//! Keypoint clips, normalization statistics and clip validation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Default number of TPS keypoints per frame (10 transforms x 5 points).
pub const DEFAULT_NUM_KEYPOINTS: usize = 50;
/// Video frame rate all clips are aligned to.
pub const DEFAULT_FPS: f64 = 25.0;
/// Floor applied to per-channel standard deviations.
pub const STD_EPSILON: f64 = 1e-6;

/// One frame of `K` keypoints in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub coords: Vec<[f64; 2]>,
}

impl KeypointFrame {
    pub fn new(coords: Vec<[f64; 2]>) -> Self {
        Self { coords }
    }

    pub fn num_keypoints(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Flattened `[x0, y0, x1, y1, ...]` row.
    pub fn to_row(&self) -> Array1<f64> {
        self.coords.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn from_row(row: ArrayView1<f64>) -> Result<Self> {
        if row.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "keypoint row has odd length {}",
                row.len()
            )));
        }
        let coords = row
            .as_slice()
            .map(|s| s.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
            .unwrap_or_else(|| {
                row.iter()
                    .copied()
                    .collect::<Vec<_>>()
                    .chunks_exact(2)
                    .map(|c| [c[0], c[1]])
                    .collect()
            });
        Ok(Self { coords })
    }
}

/// A sequence of keypoint frames stored as an `N x 2K` matrix.
///
/// Row `i` holds frame `i` as `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    data: Array2<f64>,
    fps: f64,
}

impl KeypointSequence {
    pub fn from_array(data: Array2<f64>, fps: f64) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Shape("keypoint sequence needs at least one frame".into()));
        }
        if data.ncols() == 0 || data.ncols() % 2 != 0 {
            return Err(Error::Shape(format!(
                "keypoint rows must hold 2K values, got {}",
                data.ncols()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { data, fps })
    }

    pub fn from_frames(frames: &[KeypointFrame], fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("keypoint sequence needs at least one frame".into()))?;
        let k = first.num_keypoints();
        let mut data = Array2::zeros((frames.len(), 2 * k));
        for (i, f) in frames.iter().enumerate() {
            if f.num_keypoints() != k {
                return Err(Error::KeypointMismatch {
                    expected: k,
                    found: f.num_keypoints(),
                });
            }
            data.row_mut(i).assign(&f.to_row());
        }
        Self::from_array(data, fps)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn num_keypoints(&self) -> usize {
        self.data.ncols() / 2
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> KeypointFrame {
        KeypointFrame::from_row(self.data.row(i)).expect("row length is even by construction")
    }

    pub fn frames(&self) -> Vec<KeypointFrame> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }

    /// Frames `[start, start + len)` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for {} frames",
                start + len,
                self.len()
            )));
        }
        Self::from_array(
            self.data.slice(ndarray::s![start..start + len, ..]).to_owned(),
            self.fps,
        )
    }
}

/// Per coordinate channel mean and standard deviation (length `2K` each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Zero mean, unit deviation for `k` keypoints.
    pub fn identity(k: usize) -> Self {
        Self {
            mean: vec![0.0; 2 * k],
            std: vec![1.0; 2 * k],
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.mean.len() / 2
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape(format!(
                "stats mean has {} channels but std has {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.mean.len() != channels {
            return Err(Error::KeypointMismatch {
                expected: self.mean.len() / 2,
                found: channels / 2,
            });
        }
        Ok(())
    }

    /// `(x - mean) / std` applied row-wise to an `N x 2K` array.
    pub fn normalize_array(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        let std = ArrayView1::from(&self.std[..]);
        Ok((&x - &mean) / &std)
    }

    pub fn denormalize_array(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        let std = ArrayView1::from(&self.std[..]);
        Ok(&x * &std + &mean)
    }
}

/// Running per-channel moments, mergeable across clips.
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl Moments {
    fn of(x: ArrayView2<f64>) -> Self {
        let count = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty sequence");
        let mut m2 = Array1::zeros(x.ncols());
        for row in x.rows() {
            let d = &row - &mean;
            m2 += &(&d * &d);
        }
        Self { count, mean, m2 }
    }

    fn merge(self, other: Self) -> Self {
        let count = self.count + other.count;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &(&delta * (other.count / count));
        let m2 = self.m2 + other.m2 + &delta * &delta * (self.count * other.count / count);
        Self { count, mean, m2 }
    }
}

/// Global per-channel statistics over every frame of every clip.
///
/// Uses the population deviation; channels with deviation below
/// [`STD_EPSILON`] are clamped to it.
pub fn compute_stats(dataset: &[KeypointSequence]) -> Result<NormalizationStats> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let k = first.num_keypoints();
    let mut acc: Option<Moments> = None;
    for seq in dataset {
        if seq.num_keypoints() != k {
            return Err(Error::KeypointMismatch {
                expected: k,
                found: seq.num_keypoints(),
            });
        }
        let m = Moments::of(seq.as_array());
        acc = Some(match acc {
            None => m,
            Some(a) => a.merge(m),
        });
    }
    let acc = acc.expect("dataset is non-empty");
    let std = acc
        .m2
        .iter()
        .map(|&m2| (m2 / acc.count).max(0.0).sqrt().max(STD_EPSILON))
        .collect();
    Ok(NormalizationStats {
        mean: acc.mean.to_vec(),
        std,
    })
}

pub fn normalize(seq: &KeypointSequence, stats: &NormalizationStats) -> Result<KeypointSequence> {
    KeypointSequence::from_array(stats.normalize_array(seq.as_array())?, seq.fps())
}

pub fn denormalize(seq: &KeypointSequence, stats: &NormalizationStats) -> Result<KeypointSequence> {
    KeypointSequence::from_array(stats.denormalize_array(seq.as_array())?, seq.fps())
}

/// A keypoint clip paired with the speech audio it was recorded with.
#[derive(Debug, Clone)]
pub struct GestureClip {
    pub id: String,
    pub keypoints: KeypointSequence,
    pub audio: Waveform,
}

/// One failed invariant reported by [`validate_clip`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub frame: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frame {
            Some(i) => write!(f, "{} (frame {}): {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Reports every broken clip invariant; an empty list means the clip is valid.
pub fn validate_clip(clip: &GestureClip) -> Vec<Violation> {
    let mut out = Vec::new();
    if clip.id.is_empty() {
        out.push(Violation {
            field: "id".into(),
            frame: None,
            message: "clip id is empty".into(),
        });
    }
    let kp = clip.keypoints.as_array();
    for (i, row) in kp.rows().into_iter().enumerate() {
        let bad = row.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            out.push(Violation {
                field: "keypoints".into(),
                frame: Some(i),
                message: format!("{bad} non-finite coordinate value(s)"),
            });
        }
    }
    if clip.audio.sample_rate == 0 {
        out.push(Violation {
            field: "audio".into(),
            frame: None,
            message: "sample rate is zero".into(),
        });
    } else {
        let bad = clip.audio.samples.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            out.push(Violation {
                field: "audio".into(),
                frame: None,
                message: format!("{bad} non-finite sample(s)"),
            });
        }
        let fps = clip.keypoints.fps();
        let needed = clip.keypoints.len() as f64 / fps - 1.0 / fps;
        let have = clip.audio.duration();
        if have + 1e-9 < needed {
            out.push(Violation {
                field: "audio".into(),
                frame: Some(((have * fps).floor() as usize).min(clip.keypoints.len() - 1)),
                message: format!(
                    "audio lasts {have:.3} s but keypoints span {:.3} s",
                    clip.keypoints.duration()
                ),
            });
        }
    }
    out
}
